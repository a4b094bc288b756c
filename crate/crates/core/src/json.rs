//! Canonical JSON for skeletons and strokes.
//!
//! Skeleton: `{"joints": [[x,y,z],...], "edges": [[i,j],...], "names": [..]?,
//! "root": int?, "category": str?}`.
//! Stroke: `{"joints2d": [[x,y],...], "edges": [[i,j],...], "view": str?,
//! "text": str?}`.
//!
//! Output keys are sorted, so equal graphs serialize to equal bytes. Strict
//! parsing rejects unknown keys and duplicate edges; lax parsing keeps unknown
//! keys in `extra` and collapses duplicate edges with a warning.

use std::collections::BTreeSet;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::error::ParseError;
use crate::skeleton::{Edge, SkeletonGraph, StrokeGraph2D, View};
use crate::validate::ViolationCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Strict,
    Lax,
}

const SKELETON_KEYS: [&str; 5] = ["joints", "edges", "names", "root", "category"];
const STROKE_KEYS: [&str; 4] = ["joints2d", "edges", "view", "text"];

fn edges_value(edges: &[Edge]) -> Value {
    Value::Array(edges.iter().map(|e| json!([e.a(), e.b()])).collect())
}

pub fn skeleton_to_value(g: &SkeletonGraph) -> Value {
    let mut m = g.extra.clone();
    m.insert("joints".into(), json!(g.joints));
    m.insert("edges".into(), edges_value(&g.edges));
    if let Some(names) = &g.joint_names {
        m.insert("names".into(), json!(names));
    }
    if let Some(r) = g.root {
        m.insert("root".into(), json!(r));
    }
    if let Some(c) = &g.category {
        m.insert("category".into(), json!(c.as_str()));
    }
    Value::Object(m)
}

pub fn stroke_to_value(s: &StrokeGraph2D) -> Value {
    let mut m = s.extra.clone();
    m.insert("joints2d".into(), json!(s.joints2d));
    m.insert("edges".into(), edges_value(&s.edges));
    if let Some(v) = s.view {
        m.insert("view".into(), json!(v.as_str()));
    }
    if let Some(t) = &s.text {
        m.insert("text".into(), json!(t));
    }
    Value::Object(m)
}

pub fn skeleton_to_string(g: &SkeletonGraph) -> String {
    skeleton_to_value(g).to_string()
}

pub fn stroke_to_string(s: &StrokeGraph2D) -> String {
    stroke_to_value(s).to_string()
}

pub fn skeleton_from_str(s: &str, mode: Mode) -> Result<SkeletonGraph, ParseError> {
    let v: Value = serde_json::from_str(s).map_err(|e| ParseError::at("", e.to_string()))?;
    skeleton_from_value(&v, mode)
}

pub fn stroke_from_str(s: &str, mode: Mode) -> Result<StrokeGraph2D, ParseError> {
    let v: Value = serde_json::from_str(s).map_err(|e| ParseError::at("", e.to_string()))?;
    stroke_from_value(&v, mode)
}

fn object<'a>(v: &'a Value, keys: &[&str], mode: Mode) -> Result<(&'a Map<String, Value>, Map<String, Value>), ParseError> {
    let obj = v.as_object().ok_or_else(|| ParseError::at("", "expected a JSON object"))?;
    let mut extra = Map::new();
    for (k, val) in obj {
        if !keys.contains(&k.as_str()) {
            match mode {
                Mode::Strict => return Err(ParseError::at(pointer(&[k]), format!("unknown field {k:?}"))),
                Mode::Lax => {
                    extra.insert(k.clone(), val.clone());
                }
            }
        }
    }
    Ok((obj, extra))
}

fn escape(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn pointer(tokens: &[&str]) -> String {
    tokens.iter().map(|t| format!("/{}", escape(t))).collect()
}

fn required<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, ParseError> {
    obj.get(key).ok_or_else(|| ParseError::at("", format!("missing required field {key:?}")))
}

fn points<const D: usize>(v: &Value, key: &str) -> Result<Vec<[f64; D]>, ParseError> {
    let arr = v.as_array().ok_or_else(|| ParseError::at(pointer(&[key]), "expected an array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, p)| {
            let idx = i.to_string();
            let coords = p
                .as_array()
                .filter(|c| c.len() == D)
                .ok_or_else(|| ParseError::at(pointer(&[key, &idx]), format!("expected {D} numbers")))?;
            let mut out = [0.0; D];
            for (k, c) in coords.iter().enumerate() {
                out[k] = c.as_f64().ok_or_else(|| {
                    ParseError::at(pointer(&[key, &idx, &k.to_string()]), "expected a number")
                })?;
                if !out[k].is_finite() {
                    return Err(ParseError::at(pointer(&[key, &idx, &k.to_string()]), "non-finite coordinate")
                        .with_code(ViolationCode::NonFinite));
                }
            }
            Ok(out)
        })
        .collect()
}

fn edges(v: &Value, n: usize, mode: Mode) -> Result<Vec<Edge>, ParseError> {
    let arr = v.as_array().ok_or_else(|| ParseError::at("/edges", "expected an array"))?;
    let mut set = BTreeSet::new();
    for (i, e) in arr.iter().enumerate() {
        let at = pointer(&["edges", &i.to_string()]);
        let pair = e
            .as_array()
            .filter(|p| p.len() == 2)
            .ok_or_else(|| ParseError::at(at.clone(), "expected [i, j]"))?;
        let mut ij = [0usize; 2];
        for (k, x) in pair.iter().enumerate() {
            ij[k] = x
                .as_u64()
                .ok_or_else(|| ParseError::at(format!("{at}/{k}"), "expected a non-negative integer"))?
                as usize;
            if ij[k] >= n {
                return Err(ParseError::at(format!("{at}/{k}"), format!("index {} out of range 0..{n}", ij[k]))
                    .with_code(ViolationCode::BadIndex));
            }
        }
        let edge = Edge::new(ij[0], ij[1])
            .map_err(|_| ParseError::at(at.clone(), "self-loop").with_code(ViolationCode::BadIndex))?;
        if !set.insert(edge) {
            match mode {
                Mode::Strict => {
                    return Err(ParseError::at(at, "duplicate edge").with_code(ViolationCode::DupEdge));
                }
                Mode::Lax => log::warn!("collapsing duplicate edge [{}, {}] at {at}", edge.a(), edge.b()),
            }
        }
    }
    Ok(set.into_iter().collect())
}

fn optional_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<Option<&'a str>, ParseError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ParseError::at(pointer(&[key]), "expected a string")),
    }
}

pub fn skeleton_from_value(v: &Value, mode: Mode) -> Result<SkeletonGraph, ParseError> {
    let (obj, extra) = object(v, &SKELETON_KEYS, mode)?;
    let joints = points::<3>(required(obj, "joints")?, "joints")?;
    let n = joints.len();
    let edges = edges(required(obj, "edges")?, n, mode)?;
    let joint_names = match obj.get("names") {
        None | Some(Value::Null) => None,
        Some(Value::Array(a)) => {
            let names = a
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    s.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| ParseError::at(pointer(&["names", &i.to_string()]), "expected a string"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if names.len() != n {
                return Err(ParseError::at("/names", format!("{} names for {n} joints", names.len())));
            }
            Some(names)
        }
        Some(_) => return Err(ParseError::at("/names", "expected an array of strings")),
    };
    let root = match obj.get("root") {
        None | Some(Value::Null) => None,
        Some(r) => {
            let r = r.as_u64().ok_or_else(|| ParseError::at("/root", "expected a non-negative integer"))? as usize;
            if r >= n {
                return Err(ParseError::at("/root", format!("root {r} out of range")).with_code(ViolationCode::BadIndex));
            }
            Some(r)
        }
    };
    let category = optional_str(obj, "category")?.map(|s| s.parse().unwrap());
    Ok(SkeletonGraph { joints, edges, joint_names, root, category, extra })
}

pub fn stroke_from_value(v: &Value, mode: Mode) -> Result<StrokeGraph2D, ParseError> {
    let (obj, extra) = object(v, &STROKE_KEYS, mode)?;
    let joints2d = points::<2>(required(obj, "joints2d")?, "joints2d")?;
    let edges = edges(required(obj, "edges")?, joints2d.len(), mode)?;
    let view = optional_str(obj, "view")?
        .map(|s| s.parse::<View>().map_err(|e| ParseError::at("/view", e)))
        .transpose()?;
    let text = optional_str(obj, "text")?.map(str::to_string);
    Ok(StrokeGraph2D { joints2d, edges, view, text, extra })
}

impl Serialize for SkeletonGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        skeleton_to_value(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SkeletonGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        skeleton_from_value(&v, Mode::Strict).map_err(serde::de::Error::custom)
    }
}

impl Serialize for StrokeGraph2D {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        stroke_to_value(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for StrokeGraph2D {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        stroke_from_value(&v, Mode::Strict).map_err(serde::de::Error::custom)
    }
}
