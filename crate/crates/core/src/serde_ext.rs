//! JSON has no infinities; thresholds and margins may be infinite, so
//! non-finite reals travel as the strings "inf", "-inf" and "nan".

use serde::de::{self, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::Deserialize;

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Text(String),
}

fn decode<E: de::Error>(r: Repr) -> Result<f64, E> {
    match r {
        Repr::Num(v) => Ok(v),
        Repr::Text(s) => match s.as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => other.parse().map_err(|_| E::custom(format!("not a number: {other}"))),
        },
    }
}

fn encode(v: f64) -> Result<serde_json::Value, String> {
    if v.is_finite() {
        serde_json::Number::from_f64(v)
            .map(serde_json::Value::Number)
            .ok_or_else(|| format!("cannot encode {v}"))
    } else if v.is_nan() {
        Ok("nan".into())
    } else if v > 0.0 {
        Ok("inf".into())
    } else {
        Ok("-inf".into())
    }
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(values.len()))?;
        for v in values {
            seq.serialize_element(&encode(*v).map_err(serde::ser::Error::custom)?)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(decode).collect()
    }
}

pub mod option_vec {
    use super::*;

    pub fn serialize<S: Serializer>(values: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match values {
            Some(v) => super::vec::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        Option::<Vec<Repr>>::deserialize(d)?
            .map(|v| v.into_iter().map(decode).collect())
            .transpose()
    }
}

/// Parse a comma-separated list of reals accepting `inf`.
pub fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            match s.to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                _ => s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct T {
        #[serde(with = "super::vec")]
        v: Vec<f64>,
    }

    #[test]
    fn infinities_round_trip() {
        let t = T {
            v: vec![0.5, f64::INFINITY],
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"v":[0.5,"inf"]}"#);
        assert_eq!(serde_json::from_str::<T>(&s).unwrap(), t);
        assert_eq!(super::parse_list("0.1, inf").unwrap(), vec![0.1, f64::INFINITY]);
    }
}
