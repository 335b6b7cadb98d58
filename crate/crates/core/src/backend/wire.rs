//! Strict validation of the `/v1/step` JSON protocol.
//!
//! serde alone would accept out-of-range confidences or ragged attention
//! tensors, so messages are walked as untyped JSON first. Errors name the
//! offending JSON path. Unknown fields are ignored.

use std::fmt;

use serde_json::{Map, Value};

use super::{
    AttentionLayers, BackendRequest, BackendResponse, Bias, ContextTurn, Enhance, ImageSource,
};

/// Warning attached when a response omits its confidence.
pub const MISSING_CONFIDENCE_WARNING: &str = "confidence missing; defaulted to 1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Request,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireErrorKind {
    Syntax(String),
    Missing,
    WrongType(&'static str),
    OutOfRange(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireError {
    pub path: String,
    pub kind: WireErrorKind,
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            WireErrorKind::Syntax(msg) => write!(f, "malformed JSON at {}: {msg}", self.path),
            WireErrorKind::Missing => write!(f, "missing required field {}", self.path),
            WireErrorKind::WrongType(expected) => {
                write!(f, "wrong type at {}: expected {expected}", self.path)
            }
            WireErrorKind::OutOfRange(msg) => write!(f, "out of range at {}: {msg}", self.path),
        }
    }
}

impl std::error::Error for WireError {}

fn err<T>(path: impl Into<String>, kind: WireErrorKind) -> Result<T, WireError> {
    Err(WireError {
        path: path.into(),
        kind,
    })
}

fn out_of_range<T>(path: impl Into<String>, msg: impl Into<String>) -> Result<T, WireError> {
    err(path, WireErrorKind::OutOfRange(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Request(BackendRequest),
    Response(BackendResponse),
}

pub fn validate_wire(json_text: &str, direction: Direction) -> Result<WireMessage, WireError> {
    match direction {
        Direction::Request => validate_request(json_text).map(WireMessage::Request),
        Direction::Response => validate_response(json_text).map(WireMessage::Response),
    }
}

fn parse_root(json_text: &str) -> Result<Map<String, Value>, WireError> {
    let value: Value = serde_json::from_str(json_text).or_else(|e| {
        err(
            "$",
            WireErrorKind::Syntax(format!("line {} column {}: {e}", e.line(), e.column())),
        )
    })?;
    match value {
        Value::Object(map) => Ok(map),
        _ => err("$", WireErrorKind::WrongType("object")),
    }
}

struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
}

impl<'a> Obj<'a> {
    fn new(map: &'a Map<String, Value>, path: impl Into<String>) -> Self {
        Self {
            map,
            path: path.into(),
        }
    }

    fn field_path(&self, key: &str) -> String {
        format!("{}.{key}", self.path)
    }

    /// `None` for absent or explicit null.
    fn opt(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn req(&self, key: &str) -> Result<&'a Value, WireError> {
        self.opt(key)
            .map_or_else(|| err(self.field_path(key), WireErrorKind::Missing), Ok)
    }

    fn string(&self, key: &str) -> Result<String, WireError> {
        as_string(self.req(key)?, &self.field_path(key))
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool, WireError> {
        match self.opt(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(_) => err(self.field_path(key), WireErrorKind::WrongType("boolean")),
        }
    }

    fn string_list(&self, key: &str) -> Result<Vec<String>, WireError> {
        let path = self.field_path(key);
        as_array(self.req(key)?, &path)?
            .iter()
            .enumerate()
            .map(|(i, v)| as_string(v, &format!("{path}[{i}]")))
            .collect()
    }
}

fn as_string(v: &Value, path: &str) -> Result<String, WireError> {
    v.as_str()
        .map(str::to_string)
        .map_or_else(|| err(path, WireErrorKind::WrongType("string")), Ok)
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, WireError> {
    v.as_array()
        .map_or_else(|| err(path, WireErrorKind::WrongType("array")), Ok)
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, WireError> {
    v.as_object()
        .map_or_else(|| err(path, WireErrorKind::WrongType("object")), Ok)
}

fn as_f64(v: &Value, path: &str) -> Result<f64, WireError> {
    v.as_f64()
        .map_or_else(|| err(path, WireErrorKind::WrongType("number")), Ok)
}

fn as_index(v: &Value, path: &str) -> Result<usize, WireError> {
    match v.as_u64() {
        Some(n) => Ok(n as usize),
        None if v.is_number() => out_of_range(path, "expected a nonnegative integer"),
        None => err(path, WireErrorKind::WrongType("integer")),
    }
}

pub fn validate_request(json_text: &str) -> Result<BackendRequest, WireError> {
    let root = parse_root(json_text)?;
    let obj = Obj::new(&root, "$");

    let image = match (obj.opt("image_ref"), obj.opt("image_b64")) {
        (Some(_), Some(_)) => {
            return out_of_range("$.image_ref", "image_ref and image_b64 are exclusive")
        }
        (Some(v), None) => ImageSource::Ref(as_string(v, "$.image_ref")?),
        (None, Some(v)) => ImageSource::Inline(as_string(v, "$.image_b64")?),
        (None, None) => return err("$.image_ref", WireErrorKind::Missing),
    };

    let question = obj.string("question")?;
    let keywords = obj.string_list("keywords")?;

    let context = match obj.opt("context") {
        None => Vec::new(),
        Some(v) => as_array(v, "$.context")?
            .iter()
            .enumerate()
            .map(|(i, turn)| {
                let path = format!("$.context[{i}]");
                let turn = Obj::new(as_object(turn, &path)?, path);
                Ok(ContextTurn {
                    q: turn.string("q")?,
                    a: turn.string("a")?,
                })
            })
            .collect::<Result<_, WireError>>()?,
    };

    let bias = match obj.opt("bias") {
        None => None,
        Some(v) => Some(parse_bias(v)?),
    };

    let enhance = match obj.opt("enhance") {
        None => Enhance::default(),
        Some(v) => {
            let e = Obj::new(as_object(v, "$.enhance")?, "$.enhance");
            Enhance {
                enabled: e.bool_or("enabled", false)?,
                keywords: match e.opt("keywords") {
                    None => Vec::new(),
                    Some(_) => e.string_list("keywords")?,
                },
                residual: e.bool_or("residual", false)?,
            }
        }
    };

    let want_attention = obj.bool_or("want_attention", false)?;
    if want_attention && keywords.is_empty() {
        return out_of_range(
            "$.keywords",
            "keywords must be nonempty when want_attention is set",
        );
    }

    Ok(BackendRequest {
        image,
        question,
        keywords,
        context,
        bias,
        enhance,
        want_attention,
    })
}

fn parse_bias(v: &Value) -> Result<Bias, WireError> {
    let b = Obj::new(as_object(v, "$.bias")?, "$.bias");
    let indices = as_array(b.req("indices")?, "$.bias.indices")?
        .iter()
        .enumerate()
        .map(|(i, x)| as_index(x, &format!("$.bias.indices[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = as_array(b.req("weights")?, "$.bias.weights")?
        .iter()
        .enumerate()
        .map(|(i, x)| as_f64(x, &format!("$.bias.weights[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    if indices.len() != weights.len() {
        return out_of_range(
            "$.bias",
            format!("{} indices but {} weights", indices.len(), weights.len()),
        );
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return out_of_range("$.bias", format!("weight {i} is negative or non-finite"));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = indices.iter().find(|i| !seen.insert(**i)) {
        return out_of_range("$.bias", format!("duplicate index {dup}"));
    }
    Ok(Bias { indices, weights })
}

pub fn validate_response(json_text: &str) -> Result<BackendResponse, WireError> {
    let root = parse_root(json_text)?;
    let obj = Obj::new(&root, "$");

    let answer = obj.string("answer")?;
    let mut warnings = match obj.opt("warnings") {
        None => Vec::new(),
        Some(_) => obj.string_list("warnings")?,
    };
    let confidence = match obj.opt("confidence") {
        None => {
            warnings.push(MISSING_CONFIDENCE_WARNING.to_string());
            1.0
        }
        Some(v) => {
            let c = as_f64(v, "$.confidence")?;
            if !(0.0..=1.0).contains(&c) {
                return out_of_range("$.confidence", format!("{c} outside [0, 1]"));
            }
            c
        }
    };
    let m = as_index(obj.req("visual_token_count")?, "$.visual_token_count")?;
    if m == 0 {
        return out_of_range("$.visual_token_count", "must be positive");
    }

    let attention = match obj.opt("attention") {
        None => None,
        Some(v) => Some(parse_attention(v, m)?),
    };

    let grid = match obj.opt("grid") {
        None => None,
        Some(v) => {
            let dims = as_array(v, "$.grid")?;
            if dims.len() != 2 {
                return out_of_range("$.grid", "expected [rows, cols]");
            }
            let g = [
                as_index(&dims[0], "$.grid[0]")?,
                as_index(&dims[1], "$.grid[1]")?,
            ];
            if g[0] * g[1] != m {
                return out_of_range("$.grid", format!("{}x{} != {m} visual tokens", g[0], g[1]));
            }
            Some(g)
        }
    };

    Ok(BackendResponse {
        answer,
        confidence,
        visual_token_count: m,
        attention,
        warnings,
        grid,
    })
}

fn parse_attention(v: &Value, m: usize) -> Result<AttentionLayers, WireError> {
    let layers = as_array(v, "$.attention")?;
    if layers.is_empty() {
        return out_of_range("$.attention", "no layers");
    }
    layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let lpath = format!("$.attention[{l}]");
            let rows = as_array(layer, &lpath)?;
            if rows.is_empty() {
                return out_of_range(lpath, "layer has no keyword rows");
            }
            rows.iter()
                .enumerate()
                .map(|(t, row)| {
                    let rpath = format!("{lpath}[{t}]");
                    let row = as_array(row, &rpath)?;
                    if row.len() != m {
                        return out_of_range(
                            rpath,
                            format!("row length {} != visual_token_count {m}", row.len()),
                        );
                    }
                    row.iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let p = format!("{rpath}[{j}]");
                            let x = as_f64(x, &p)?;
                            if !x.is_finite() || x < 0.0 {
                                return out_of_range(p, "attention must be nonnegative");
                            }
                            Ok(x)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}
