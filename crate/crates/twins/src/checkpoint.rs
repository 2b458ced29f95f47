//! Plain-text checkpoints of a classifier pair.
//!
//! ```text
//! twins-checkpoint v1
//! widths 2 64 64 10
//! f1.layer0.weight
//! 2 64
//! <row-major values>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use twins_core::nn::{ClassifierPair, MlpClassifier, Param};
use twins_core::Tensor;

use crate::error::{Error, Result};

pub const HEADER: &str = "twins-checkpoint v1";

pub fn to_string(pair: &ClassifierPair) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    let widths: Vec<String> = pair.widths().iter().map(|w| w.to_string()).collect();
    writeln!(out, "widths {}", widths.join(" ")).unwrap();
    for (tag, net) in [("f1", &pair.f1), ("f2", &pair.f2)] {
        for p in net.params() {
            writeln!(out, "{tag}.{}", p.name).unwrap();
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "{}", shape.join(" ")).unwrap();
            let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", vals.join(" ")).unwrap();
        }
    }
    out
}

fn numbers<T: std::str::FromStr>(line: &str, source: &str, what: &str) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::format(source, format!("bad {what} value `{t}`"))))
        .collect()
}

pub fn from_str(text: &str, source: &str) -> Result<ClassifierPair> {
    let mut lines = text.lines();
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::format(source, format!("missing {what}")));
    let header = next("header")?;
    if header != HEADER {
        return Err(Error::format(source, format!("unsupported header `{header}`")));
    }
    let widths: Vec<usize> = match next("widths")?.strip_prefix("widths ") {
        Some(rest) => numbers(rest, source, "width")?,
        None => return Err(Error::format(source, "expected `widths` line")),
    };
    let per_net = 2 * widths.len().saturating_sub(1);
    let mut nets = Vec::with_capacity(2);
    for tag in ["f1", "f2"] {
        let mut params = Vec::with_capacity(per_net);
        for _ in 0..per_net {
            let name = next("parameter name")?;
            let Some(name) = name.strip_prefix(tag).and_then(|n| n.strip_prefix('.')) else {
                return Err(Error::format(source, format!("expected a {tag} parameter, found `{name}`")));
            };
            let shape: Vec<usize> = numbers(next("shape")?, source, "shape")?;
            let values: Vec<f64> = numbers(next("values")?, source, "parameter")?;
            let value = Tensor::new(shape, values).map_err(|e| Error::format(source, format!("{name}: {e}")))?;
            params.push(Param::new(name, value));
        }
        nets.push(MlpClassifier::from_params(&widths, params).map_err(|e| Error::format(source, e.to_string()))?);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::format(source, "trailing content"));
    }
    let f2 = nets.pop().unwrap();
    let f1 = nets.pop().unwrap();
    Ok(ClassifierPair::new(f1, f2)?)
}

pub fn save(pair: &ClassifierPair, path: &Path) -> Result<()> {
    fs::write(path, to_string(pair)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ClassifierPair> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use twins_core::nn::init_pair;

    #[test]
    fn round_trip_is_exact() {
        let pair = init_pair(&[3, 5, 4, 2], 11).unwrap();
        let text = to_string(&pair);
        assert!(text.starts_with(HEADER));
        assert_eq!(from_str(&text, "mem").unwrap(), pair);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let pair = init_pair(&[2, 2], 1).unwrap();
        let text = to_string(&pair).replace("v1", "v9");
        assert!(matches!(from_str(&text, "mem"), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let pair = init_pair(&[2, 3, 2], 1).unwrap();
        let text = to_string(&pair);
        let cut = &text[..text.len() / 2];
        assert!(from_str(cut, "mem").is_err());
    }
}
