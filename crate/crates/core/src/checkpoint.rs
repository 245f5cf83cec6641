//! Model checkpoints as JSON in which every float is written as the hex
//! string of its IEEE-754 bits, so a save/load round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::discrete::DiscreteModel;
use crate::error::{Error, Result};
use crate::mean_field::MeanFieldParams;
use crate::optim::OptState;
use crate::params::HeadCloud;

const DISCRETE_FORMAT: &str = "mfa-discrete-v1";
const MEAN_FIELD_FORMAT: &str = "mfa-mean-field-v1";

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    seed: u64,
    beta: f64,
    k: usize,
    d: usize,
    /// Layer count for discrete models, `L_ref` for mean-field grids.
    depth: usize,
    heads_per_layer: Vec<usize>,
    layers: Vec<HeadCloud>,
    opt: Vec<Vec<OptState>>,
}

fn encode(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            Value::String(format!("0x{:016x}", x.to_bits()))
        }
        Value::Array(a) => Value::Array(a.into_iter().map(encode).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, encode(v))).collect::<Map<_, _>>()),
        other => other,
    }
}

fn decode(v: Value) -> Result<Value> {
    Ok(match v {
        Value::String(s) if s.len() == 18 && s.starts_with("0x") => {
            let bits = u64::from_str_radix(&s[2..], 16)
                .map_err(|e| Error::InvalidInput(format!("bad float encoding {s}: {e}")))?;
            let x = f64::from_bits(bits);
            Value::Number(Number::from_f64(x).ok_or_else(|| Error::NumericBlowup(format!("non-finite value {s} in checkpoint")))?)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(decode).collect::<Result<_>>()?),
        Value::Object(o) => Value::Object(
            o.into_iter()
                .map(|(k, v)| decode(v).map(|v| (k, v)))
                .collect::<Result<Map<_, _>>>()?,
        ),
        other => other,
    })
}

fn write_envelope(env: &Envelope) -> Result<String> {
    let value = encode(serde_json::to_value(env)?);
    Ok(serde_json::to_string_pretty(&value)?)
}

fn read_envelope(text: &str, format: &str) -> Result<Envelope> {
    let value = decode(serde_json::from_str(text)?)?;
    let env: Envelope = serde_json::from_value(value)?;
    if env.format != format {
        return Err(Error::InvalidInput(format!("expected checkpoint format {format}, found {}", env.format)));
    }
    if env.layers.len() != env.depth || env.heads_per_layer != env.layers.iter().map(HeadCloud::len).collect::<Vec<_>>() {
        return Err(Error::InvalidInput("checkpoint header disagrees with its layers".into()));
    }
    if env.layers.iter().any(|c| c.k() != env.k || c.d() != env.d) {
        return Err(Error::InvalidInput("checkpoint header dimensions disagree with its heads".into()));
    }
    Ok(env)
}

fn envelope(format: &str, seed: u64, beta: f64, layers: &[HeadCloud], opt: &[Vec<OptState>]) -> Envelope {
    Envelope {
        format: format.into(),
        seed,
        beta,
        k: layers[0].k(),
        d: layers[0].d(),
        depth: layers.len(),
        heads_per_layer: layers.iter().map(HeadCloud::len).collect(),
        layers: layers.to_vec(),
        opt: opt.to_vec(),
    }
}

pub fn discrete_to_string(model: &DiscreteModel, seed: u64) -> Result<String> {
    write_envelope(&envelope(DISCRETE_FORMAT, seed, model.beta, model.layers(), model.opt_states()))
}

/// Returns the model and the seed it was saved with.
pub fn discrete_from_str(text: &str) -> Result<(DiscreteModel, u64)> {
    let env = read_envelope(text, DISCRETE_FORMAT)?;
    Ok((DiscreteModel::from_parts(env.beta, env.layers, env.opt)?, env.seed))
}

pub fn mean_field_to_string(mf: &MeanFieldParams, seed: u64) -> Result<String> {
    write_envelope(&envelope(MEAN_FIELD_FORMAT, seed, mf.beta, mf.clouds(), mf.opt_states()))
}

pub fn mean_field_from_str(text: &str) -> Result<(MeanFieldParams, u64)> {
    let env = read_envelope(text, MEAN_FIELD_FORMAT)?;
    Ok((MeanFieldParams::from_parts(env.beta, env.layers, env.opt)?, env.seed))
}

pub fn save_discrete(path: &Path, model: &DiscreteModel, seed: u64) -> Result<()> {
    std::fs::write(path, discrete_to_string(model, seed)?)?;
    Ok(())
}

pub fn load_discrete(path: &Path) -> Result<(DiscreteModel, u64)> {
    discrete_from_str(&std::fs::read_to_string(path)?)
}

pub fn save_mean_field(path: &Path, mf: &MeanFieldParams, seed: u64) -> Result<()> {
    std::fs::write(path, mean_field_to_string(mf, seed)?)?;
    Ok(())
}

pub fn load_mean_field(path: &Path) -> Result<(MeanFieldParams, u64)> {
    mean_field_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awkward_floats_survive() {
        for x in [0.1, -0.0, 1e-308, 5e-324, f64::MAX, 1.0 / 3.0] {
            let v = decode(encode(serde_json::json!({ "x": x }))).unwrap();
            assert_eq!(v["x"].as_f64().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn integers_are_left_alone() {
        let v = encode(serde_json::json!({ "n": 3, "x": 3.0 }));
        assert_eq!(v["n"], 3);
        assert!(v["x"].is_string());
    }
}
