//! Sequence metrics and distribution distances.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

fn check_pairs<T>(hyps: &[T], refs: &[T]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            left: hyps.len(),
            right: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    Ok(())
}

/// Fraction of hypotheses identical to their reference.
pub fn exact_match<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hyps.len() as f64)
}

/// Position-wise accuracy; a length difference counts every missing or
/// extra position as wrong.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    })
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU on a 0-100 scale with clipped n-gram precisions up to
/// `max_n`, no smoothing, and the exponential brevity penalty. An order
/// with no hypothesis n-grams has precision zero.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    check_pairs(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::invalid("max_n must be positive"));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            total += h.len().saturating_sub(n - 1);
            matched += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok((100.0 * bp * (log_sum / max_n as f64).exp()).clamp(0.0, 100.0))
}

/// Total variation distance between two distributions on the same support.
pub fn tv_distance<K: Ord + std::fmt::Debug>(
    p: &BTreeMap<K, f64>,
    q: &BTreeMap<K, f64>,
) -> Result<f64> {
    if p.len() != q.len() || p.keys().zip(q.keys()).any(|(a, b)| a != b) {
        let only_p: Vec<_> = p.keys().filter(|k| !q.contains_key(k)).collect();
        let only_q: Vec<_> = q.keys().filter(|k| !p.contains_key(k)).collect();
        return Err(Error::SupportMismatch(format!(
            "only in first: {only_p:?}; only in second: {only_q:?}"
        )));
    }
    Ok(0.5
        * p.values()
            .zip(q.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// TV distance between empirical `counts` and an exact distribution. Outcomes
/// never observed count as zero; an observed outcome outside the exact
/// support is an error.
pub fn tv_from_counts<K: Ord + Clone + std::fmt::Debug>(
    counts: &BTreeMap<K, u64>,
    exact: &BTreeMap<K, f64>,
) -> Result<f64> {
    let n: u64 = counts.values().sum();
    if n == 0 {
        return Err(Error::Empty("empirical counts"));
    }
    if let Some(k) = counts.keys().find(|k| !exact.contains_key(k)) {
        return Err(Error::SupportMismatch(format!(
            "observed {k:?} outside the exact support"
        )));
    }
    let p: BTreeMap<K, f64> = exact
        .keys()
        .map(|k| {
            (
                k.clone(),
                counts.get(k).copied().unwrap_or(0) as f64 / n as f64,
            )
        })
        .collect();
    tv_distance(&p, exact)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

/// Metrics for one evaluation run plus the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub config: BTreeMap<String, String>,
    pub metrics: Vec<Metric>,
}

impl EvalReport {
    pub fn new(samples: usize, config: BTreeMap<String, String>) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Empty("evaluation set"));
        }
        Ok(Self {
            samples,
            config,
            metrics: Vec::new(),
        })
    }

    pub fn push(&mut self, name: &str, value: f64) -> Result<()> {
        let max = if name == "bleu" { 100.0 } else { 1.0 };
        if !(0.0..=max).contains(&value) {
            return Err(Error::invalid(format!("{name}={value} outside [0, {max}]")));
        }
        self.metrics.push(Metric {
            name: name.to_string(),
            value,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.value)
    }

    /// A `#` header echoing the config, one `key=value` line per metric,
    /// then the whole report as one JSON line.
    pub fn render(&self) -> String {
        let mut out = String::from("# eval");
        for (k, v) in &self.config {
            out.push_str(&format!(" {k}={v}"));
        }
        out.push_str(" bleu=plain-corpus-bleu\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "metric={} value={:.6} samples={}",
                m.name, m.value, self.samples
            ));
            for (k, v) in &self.config {
                out.push_str(&format!(" {k}={v}"));
            }
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(self).expect("report serializes"));
        out.push('\n');
        out
    }
}
