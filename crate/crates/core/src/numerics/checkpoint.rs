//! Text checkpoint format.
//!
//! ```text
//! dproto-checkpoint 1
//! meta<TAB>key<TAB>value
//! tensor<TAB>name<TAB>d0,d1,...<TAB>v0 v1 v2 ...
//! ```
//!
//! One record per line, UTF-8. Values are row-major and written in Rust's
//! shortest round-trip exponent notation, so a write/read cycle is bit-exact.
//! `meta` lines precede `tensor` lines; both keep insertion order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "dproto-checkpoint 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta\t{k}\t{v}");
        }
        for (name, t) in self.tensors.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = write!(out, "tensor\t{name}\t{}\t", dims.join(","));
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Checkpoint(format!("missing `{MAGIC}` header")));
        }
        let mut ck = Checkpoint::default();
        for (n, line) in lines.enumerate() {
            let bad = |msg: &str| Error::Checkpoint(format!("line {}: {msg}", n + 2));
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", key, value] => {
                    ck.meta.insert((*key).to_string(), (*value).to_string());
                }
                ["tensor", name, dims, values] => {
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                        .collect::<Result<Vec<_>>>()?;
                    let data = values
                        .split(' ')
                        .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
                        .collect::<Result<Vec<_>>>()?;
                    let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
                    if ck.tensors.get(name).is_some() {
                        return Err(bad("duplicate tensor name"));
                    }
                    ck.tensors.insert(*name, t);
                }
                _ => return Err(bad("unrecognized record")),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..40)) {
            let mut ck = Checkpoint::default();
            ck.meta.insert("model.channels".into(), "16".into());
            ck.tensors.insert("w", Tensor::new(vec![values.len()], values.clone()).unwrap());
            let back = Checkpoint::parse(&ck.to_text()).unwrap();
            let got = back.tensors.get("w").unwrap().data();
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::parse("nope\n").is_err());
        let bad = format!("{MAGIC}\ntensor\tw\t2\t1e0\n");
        assert!(Checkpoint::parse(&bad).is_err());
    }
}
