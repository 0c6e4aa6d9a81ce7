//! Plain-text checkpoints for named networks.
//!
//! ```text
//! uniweight-checkpoint 1
//! net swn.F 1
//! layer 1 16 relu
//! w <16 values>
//! b <16 values>
//! end
//! ```
//!
//! Values are written with nine significant digits, one weight row per `w`
//! line.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::mlp::{Activation, Dense, Mlp};
use crate::error::{Error, Result};
use crate::fmt::sig9;

pub const HEADER: &str = "uniweight-checkpoint 1";

/// An ordered list of named networks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub nets: Vec<(String, Mlp)>,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("line {line}: {msg}"))
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, net: Mlp) {
        self.nets.push((name.into(), net));
    }

    pub fn get(&self, name: &str) -> Option<&Mlp> {
        self.nets.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Like [`Checkpoint::get`] but an error when missing.
    pub fn require(&self, name: &str) -> Result<&Mlp> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing network `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push('\n');
        for (name, net) in &self.nets {
            let _ = writeln!(s, "net {name} {}", net.layers.len());
            for l in &net.layers {
                let _ = writeln!(
                    s,
                    "layer {} {} {}",
                    l.input_dim(),
                    l.output_dim(),
                    l.activation.name()
                );
                for row in l.weight.rows() {
                    s.push('w');
                    for v in row {
                        s.push(' ');
                        s.push_str(&sig9(*v));
                    }
                    s.push('\n');
                }
                s.push('b');
                for v in &l.bias {
                    s.push(' ');
                    s.push_str(&sig9(*v));
                }
                s.push('\n');
            }
            s.push_str("end\n");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            Some((n, h)) => return Err(bad(n, format!("expected `{HEADER}`, found `{h}`"))),
            None => return Err(Error::Checkpoint("empty checkpoint".into())),
        }
        let mut out = Checkpoint::default();
        while let Some((n, line)) = lines.next() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let (name, count) = match parts.as_slice() {
                ["net", name, count] => (
                    name.to_string(),
                    count.parse::<usize>().map_err(|e| bad(n, e))?,
                ),
                _ => return Err(bad(n, format!("expected `net <name> <layers>`, found `{line}`"))),
            };
            let mut layers = Vec::with_capacity(count);
            for _ in 0..count {
                let (n, line) = lines.next().ok_or_else(|| bad(n, "truncated network"))?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                let (input, output, act) = match parts.as_slice() {
                    ["layer", i, o, a] => {
                        let act = match *a {
                            "relu" => Activation::Relu,
                            "identity" => Activation::Identity,
                            other => return Err(bad(n, format!("unknown activation `{other}`"))),
                        };
                        (
                            i.parse::<usize>().map_err(|e| bad(n, e))?,
                            o.parse::<usize>().map_err(|e| bad(n, e))?,
                            act,
                        )
                    }
                    _ => return Err(bad(n, format!("expected `layer`, found `{line}`"))),
                };
                let mut weight = Array2::zeros((output, input));
                for r in 0..output {
                    let (n, line) = lines.next().ok_or_else(|| bad(n, "truncated layer"))?;
                    let row = parse_values(n, line, 'w', input)?;
                    weight.row_mut(r).assign(&Array1::from(row));
                }
                let (n, line) = lines.next().ok_or_else(|| bad(n, "truncated layer"))?;
                let bias = Array1::from(parse_values(n, line, 'b', output)?);
                layers.push(Dense {
                    weight,
                    bias,
                    activation: act,
                });
            }
            match lines.next() {
                Some((_, "end")) => {}
                Some((n, l)) => return Err(bad(n, format!("expected `end`, found `{l}`"))),
                None => return Err(Error::Checkpoint(format!("network `{name}` not terminated"))),
            }
            out.nets.push((name, Mlp::new(layers)?));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_values(n: usize, line: &str, tag: char, expect: usize) -> Result<Vec<f64>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag.encode_utf8(&mut [0; 4])) {
        return Err(bad(n, format!("expected a `{tag}` line")));
    }
    let vals = it
        .map(|t| t.parse::<f64>().map_err(|e| bad(n, format!("`{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expect {
        return Err(bad(n, format!("expected {expect} values, found {}", vals.len())));
    }
    Ok(vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("a", Mlp::gaussian(&[3, 4, 2], 0.3, 1).unwrap());
        c.push("b", Mlp::gaussian(&[1, 2], 1e-4, 2).unwrap());
        c
    }

    #[test]
    fn round_trip_within_nine_digits() {
        let c = sample();
        let back = Checkpoint::from_text(&c.to_text()).unwrap();
        assert_eq!(back.nets.len(), 2);
        for ((n0, a), (n1, b)) in c.nets.iter().zip(&back.nets) {
            assert_eq!(n0, n1);
            for (x, y) in a.to_flat().iter().zip(b.to_flat()) {
                assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-300), "{x} vs {y}");
            }
        }
        // a second trip is exact
        assert_eq!(back.to_text(), Checkpoint::from_text(&back.to_text()).unwrap().to_text());
    }

    #[test]
    fn rejects_malformed() {
        assert!(Checkpoint::from_text("").is_err());
        assert!(Checkpoint::from_text("other 1\n").is_err());
        let text = sample().to_text();
        let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
        let corrupted = text.replacen("relu", "tanh", 1);
        assert!(Checkpoint::from_text(&corrupted).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.txt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_text(), c.to_text());
        assert!(c.require("missing").is_err());
    }
}
