//! `--assert` expressions: `path OP number`, where `path` is a dotted JSON
//! path into the report (`exact_match`, `pairs.0.t`) and `OP` is one of
//! `>= <= > < == !=`.

use anyhow::{anyhow, bail, Result};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Ge,
    Le,
    Gt,
    Lt,
    Eq,
    Ne,
}

impl Op {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Op::Ge => lhs >= rhs,
            Op::Le => lhs <= rhs,
            Op::Gt => lhs > rhs,
            Op::Lt => lhs < rhs,
            Op::Eq => lhs == rhs,
            Op::Ne => lhs != rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    text: String,
    path: Vec<String>,
    op: Op,
    value: f64,
}

impl Check {
    pub fn parse(text: &str) -> Result<Self> {
        const OPS: [(&str, Op); 6] = [
            (">=", Op::Ge),
            ("<=", Op::Le),
            ("==", Op::Eq),
            ("!=", Op::Ne),
            (">", Op::Gt),
            ("<", Op::Lt),
        ];
        let (at, sym, op) = OPS
            .iter()
            .filter_map(|&(sym, op)| text.find(sym).map(|at| (at, sym, op)))
            .min_by_key(|&(at, sym, _)| (at, std::cmp::Reverse(sym.len())))
            .ok_or_else(|| anyhow!("--assert `{text}`: expected METRIC OP NUMBER"))?;
        let lhs = text[..at].trim();
        let rhs = text[at + sym.len()..].trim();
        if lhs.is_empty() {
            bail!("--assert `{text}`: missing metric name");
        }
        let value: f64 = rhs
            .parse()
            .map_err(|_| anyhow!("--assert `{text}`: `{rhs}` is not a number"))?;
        Ok(Self {
            text: text.to_string(),
            path: lhs.split('.').map(str::to_string).collect(),
            op,
            value,
        })
    }

    /// `Err` carries a description of the failure.
    pub fn evaluate(&self, doc: &Value) -> std::result::Result<(), String> {
        let mut node = doc;
        for key in &self.path {
            node = match node {
                Value::Object(map) => map.get(key),
                Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get(i)),
                _ => None,
            }
            .ok_or_else(|| format!("`{}`: no field `{}`", self.text, self.path.join(".")))?;
        }
        let actual = match node {
            Value::Number(n) => n.as_f64(),
            Value::Bool(b) => Some(f64::from(u8::from(*b))),
            _ => None,
        }
        .ok_or_else(|| format!("`{}`: value {node} is not numeric", self.text))?;
        if self.op.holds(actual, self.value) {
            Ok(())
        } else {
            Err(format!("`{}` (actual {actual})", self.text))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_operators() {
        let c = Check::parse("exact_match>=0.99").unwrap();
        assert_eq!(c.op, Op::Ge);
        assert_eq!(c.path, vec!["exact_match"]);
        assert_eq!(Check::parse("pairs.0.t <= 0").unwrap().op, Op::Le);
        assert_eq!(Check::parse("x>1").unwrap().op, Op::Gt);
        assert!(Check::parse("exact_match").is_err());
        assert!(Check::parse(">=1").is_err());
        assert!(Check::parse("a>=b").is_err());
    }

    #[test]
    fn evaluates_paths() {
        let doc = json!({"exact_match": 1.0, "pairs": [{"t": -0.5}], "r": null});
        assert!(Check::parse("exact_match>=0.99").unwrap().evaluate(&doc).is_ok());
        assert!(Check::parse("pairs.0.t<=0").unwrap().evaluate(&doc).is_ok());
        assert!(Check::parse("pairs.0.t>0").unwrap().evaluate(&doc).is_err());
        assert!(Check::parse("r<0").unwrap().evaluate(&doc).is_err());
        assert!(Check::parse("missing<0").unwrap().evaluate(&doc).is_err());
    }
}
