//! Flat `key = value` text documents used for configs and task specs.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Splits a document into `(key, value)` pairs. Text after `#` is a
/// comment; blank lines are skipped; duplicate keys are rejected.
pub fn pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split_once('#').map_or(line, |(before, _)| before).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Validation(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Validation(format!("line {}: duplicate key {k:?}", i + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

pub fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("{key}: cannot parse {value:?}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Validation(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Comma-separated reals.
pub fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse_num(key, s.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let p = pairs("# c\n a = 1 \n\nb=x y\n").unwrap();
        assert_eq!(p, vec![("a".into(), "1".into()), ("b".into(), "x y".into())]);
        assert_eq!(pairs("k = v   # note\n").unwrap(), vec![("k".into(), "v".into())]);
        assert!(pairs("a = 1\na = 2").is_err());
        assert!(pairs("novalue").is_err());
        assert_eq!(parse_list("k", "1, -2.5,3").unwrap(), vec![1.0, -2.5, 3.0]);
        assert!(parse_num::<usize>("k", "-1").is_err());
        assert!(parse_bool("k", "maybe").is_err());
    }
}
