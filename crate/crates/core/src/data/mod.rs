//! Tokenization, corpus files, prompt/response examples and synthetic tasks.

mod corpus;
mod synthetic;
mod tokenizer;

pub use corpus::{escape_field, parse_corpus, unescape_field, write_corpus, CorpusLine};
pub use synthetic::{generate_synthetic, Cipher, SyntheticData, SyntheticSpec, SyntheticTask};
pub use tokenizer::{Tokenizer, TokenizerMode};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

/// A conditioning prompt (ending in `[SEP]`) and its target response.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.prompt.len() + self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The prompt followed by the response.
    pub fn concat(&self) -> Vec<TokenId> {
        let mut v = self.prompt.clone();
        v.extend_from_slice(&self.response);
        v
    }

    /// Prompt content without the trailing separator.
    pub fn payload(&self) -> &[TokenId] {
        &self.prompt[..self.prompt.len().saturating_sub(1)]
    }

    pub fn validate(&self, vocab: &Vocab, max_positions: usize) -> std::result::Result<(), String> {
        if self.prompt.last() != Some(&vocab.sep_id()) {
            return Err("prompt does not end with the separator".into());
        }
        if self.response.is_empty() {
            return Err("empty response".into());
        }
        let mask = vocab.mask_id();
        if self.prompt.contains(&mask) || self.response.contains(&mask) {
            return Err("contains the mask token".into());
        }
        if let Some(t) = self.concat().into_iter().find(|t| t.index() >= vocab.len()) {
            return Err(format!("token id {t} outside the vocabulary"));
        }
        if self.len() > max_positions {
            return Err(format!(
                "prompt length {} plus response length {} exceeds {max_positions} positions",
                self.prompt.len(),
                self.response.len()
            ));
        }
        Ok(())
    }
}

/// Check every example, reporting the first offending index.
pub fn validate_examples(examples: &[Example], vocab: &Vocab, max_positions: usize) -> Result<()> {
    for (index, ex) in examples.iter().enumerate() {
        ex.validate(vocab, max_positions)
            .map_err(|message| Error::BadExample { index, message })?;
    }
    Ok(())
}

/// Instruction-style template: the instruction and input, joined by a single
/// space when both are present, form the prompt; the output is the response.
pub fn format_example(
    instruction: &str,
    input: &str,
    output: &str,
    tokenizer: &Tokenizer,
    max_positions: usize,
) -> Result<Example> {
    if output.is_empty() {
        return Err(Error::Empty("output text"));
    }
    let text = match (instruction.is_empty(), input.is_empty()) {
        (true, _) => input.to_string(),
        (false, true) => instruction.to_string(),
        (false, false) => format!("{instruction} {input}"),
    };
    let mut prompt = tokenizer.tokenize(&text)?;
    prompt.push(tokenizer.vocab().sep_id());
    let response = tokenizer.tokenize(output)?;
    if prompt.len() + response.len() > max_positions {
        return Err(Error::invalid(format!(
            "prompt length {} plus response length {} exceeds {max_positions} positions",
            prompt.len(),
            response.len()
        )));
    }
    Ok(Example { prompt, response })
}

/// Tokenize corpus lines into examples. Errors name the corpus line.
pub fn examples_from_corpus(
    lines: &[CorpusLine],
    tokenizer: &Tokenizer,
    max_positions: usize,
) -> Result<Vec<Example>> {
    lines
        .iter()
        .map(|l| {
            let wrap = |e: Error| Error::Corpus {
                line: l.line,
                message: e.to_string(),
            };
            let ex = format_example("", &l.prompt, &l.response, tokenizer, max_positions)
                .map_err(wrap)?;
            ex.validate(tokenizer.vocab(), max_positions)
                .map_err(|message| Error::Corpus {
                    line: l.line,
                    message,
                })?;
            Ok(ex)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn char_tok(text: &str) -> Tokenizer {
        Tokenizer::fit([text], TokenizerMode::Char).unwrap()
    }

    #[test]
    fn german_template_renders() {
        let tok = char_tok(
            "Translate the German sentence into English. German: Vielen dank. English: Thank you",
        );
        let ex = format_example(
            "Translate the German sentence into English.",
            "German: Vielen dank. English:",
            "Thank you",
            &tok,
            256,
        )
        .unwrap();
        let (body, sep) = ex.prompt.split_at(ex.prompt.len() - 1);
        assert_eq!(sep, [tok.vocab().sep_id()]);
        assert_eq!(
            tok.detokenize(body).unwrap(),
            "Translate the German sentence into English. German: Vielen dank. English:"
        );
        assert_eq!(tok.detokenize(&ex.response).unwrap(), "Thank you");
    }

    #[test]
    fn empty_instruction_uses_input_only() {
        let tok = char_tok("abc");
        let ex = format_example("", "ab", "c", &tok, 16).unwrap();
        let mut want = tok.tokenize("ab").unwrap();
        want.push(tok.vocab().sep_id());
        assert_eq!(ex.prompt, want);
        assert_eq!(tok.detokenize(&ex.response).unwrap(), "c");
    }

    #[test]
    fn overlong_and_empty_rejected() {
        let tok = char_tok("abc");
        let err = format_example("", "abc", "abc", &tok, 6)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains('4') && err.contains('3') && err.contains('6'),
            "{err}"
        );
        assert!(format_example("", "a", "", &tok, 6).is_err());
    }

    #[test]
    fn corpus_errors_name_the_line() {
        let tok = char_tok("ab");
        let lines = parse_corpus("a\tb\n# x\na\tz\n").unwrap();
        match examples_from_corpus(&lines, &tok, 16) {
            Err(Error::Corpus { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
