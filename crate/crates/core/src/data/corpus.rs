//! Line-oriented corpus files: `prompt<TAB>response` per line, with `\t`,
//! `\n` and `\\` escapes inside fields and `#` comment lines.

use crate::error::{Error, Result};

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            Some(other) => return Err(format!("unknown escape '\\{other}'")),
            None => return Err("dangling backslash".to_string()),
        }
    }
    Ok(out)
}

/// A prompt/response text pair with the 1-based line it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLine {
    pub line: usize,
    pub prompt: String,
    pub response: String,
}

/// Parse corpus text. Blank lines and lines starting with `#` are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusLine>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Corpus {
                line,
                message: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let decode = |f: &str| unescape_field(f).map_err(|message| Error::Corpus { line, message });
        out.push(CorpusLine {
            line,
            prompt: decode(fields[0])?,
            response: decode(fields[1])?,
        });
    }
    Ok(out)
}

pub fn write_corpus<'a, I>(pairs: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut out = String::new();
    for (p, r) in pairs {
        out.push_str(&escape_field(p));
        out.push('\t');
        out.push_str(&escape_field(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn comments_and_blank_lines_skipped() {
        let c = parse_corpus("# header\n\nab\tba\nx\\ty\tz\\n\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].line, 3);
        assert_eq!(c[1].prompt, "x\ty");
        assert_eq!(c[1].response, "z\n");
    }

    #[test]
    fn malformed_line_reports_number() {
        match parse_corpus("a\tb\nno tab here\n") {
            Err(Error::Corpus { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_corpus("a\tb\n# c\na\\q\tb\n") {
            Err(Error::Corpus { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(pairs in prop::collection::vec(("[^#]\\PC{0,10}|", "\\PC{0,10}"), 0..8)) {
            let pairs: Vec<(String, String)> = pairs
                .into_iter()
                .filter(|(p, r)| !(p.is_empty() && r.is_empty()))
                .collect();
            let text = write_corpus(pairs.iter().map(|(p, r)| (p.as_str(), r.as_str())));
            let back = parse_corpus(&text).unwrap();
            let got: Vec<(String, String)> = back.into_iter().map(|l| (l.prompt, l.response)).collect();
            prop_assert_eq!(got, pairs);
        }
    }
}
