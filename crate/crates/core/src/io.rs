//! PLY storage for Gaussian fields.
//!
//! Native files carry one `vertex` element with double properties
//! `x y z qw qx qy qz sx sy sz opacity red green blue`, an optional int
//! `label` and the embedding as `e0..e{E-1}`. Files in the usual splatting
//! layout (`rot_0..3`, log `scale_0..2`, logit `opacity`, `f_dc_0..2`) and
//! plain point clouds with `x y z` only are read as well.

use crate::error::{Error, Result};
use crate::gaussian::{GaussianRecord, SceneState};
use crate::math::Vec3;
use nalgebra::{Quaternion, UnitQuaternion};
use ply_rs::parser::Parser;
use ply_rs::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType, ScalarType,
};
use ply_rs::writer::Writer;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyEncoding {
    #[default]
    BinaryLittleEndian,
    Ascii,
}

const BASE_PROPS: [&str; 14] = ["x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity", "red", "green", "blue"];
const STATE_TAG: &str = "state_tag";
// zeroth-order spherical harmonic
const SH_C0: f64 = 0.282_094_791_773_878_14;

fn double_prop(name: &str) -> PropertyDef {
    PropertyDef::new(name.to_string(), PropertyType::Scalar(ScalarType::Double))
}

/// Writes `state`; `labels` overrides the state's ground-truth labels.
pub fn write_ply_to<W: Write>(
    out: &mut W,
    state: &SceneState,
    labels: Option<&[usize]>,
    encoding: PlyEncoding,
) -> Result<()> {
    let labels = labels.or(state.gt_labels.as_deref());
    if let Some(l) = labels {
        if l.len() != state.len() {
            return Err(Error::DimensionMismatch(format!("{} labels for {} gaussians", l.len(), state.len())));
        }
    }
    let dim = state.embedding_dim();
    if state.gaussians.iter().any(|g| g.embedding.len() != dim) {
        return Err(Error::DimensionMismatch("embeddings differ in length".into()));
    }
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = match encoding {
        PlyEncoding::BinaryLittleEndian => Encoding::BinaryLittleEndian,
        PlyEncoding::Ascii => Encoding::Ascii,
    };
    ply.header.comments.push(format!("{STATE_TAG} {}", state.state_tag));
    let mut def = ElementDef::new("vertex".to_string());
    for name in BASE_PROPS {
        def.properties.add(double_prop(name));
    }
    if labels.is_some() {
        def.properties.add(PropertyDef::new("label".to_string(), PropertyType::Scalar(ScalarType::Int)));
    }
    for d in 0..dim {
        def.properties.add(double_prop(&format!("e{d}")));
    }
    ply.header.elements.add(def);

    let mut rows = Vec::with_capacity(state.len());
    for (i, g) in state.gaussians.iter().enumerate() {
        let q = g.rotation.quaternion();
        let values = [
            g.center.x, g.center.y, g.center.z, q.w, q.i, q.j, q.k, g.scale.x, g.scale.y, g.scale.z, g.opacity,
            g.color.x, g.color.y, g.color.z,
        ];
        let mut row = DefaultElement::new();
        for (name, v) in BASE_PROPS.iter().zip(values) {
            row.insert(name.to_string(), Property::Double(v));
        }
        if let Some(l) = labels {
            let v = i32::try_from(l[i]).map_err(|_| Error::InvalidParameter(format!("label {} too large", l[i])))?;
            row.insert("label".to_string(), Property::Int(v));
        }
        for (d, v) in g.embedding.iter().enumerate() {
            row.insert(format!("e{d}"), Property::Double(*v));
        }
        rows.push(row);
    }
    ply.payload.insert("vertex".to_string(), rows);
    ply.make_consistent().map_err(|e| Error::Ply(format!("{e:?}")))?;
    Writer::new().write_ply(out, &mut ply)?;
    Ok(())
}

pub fn write_ply(path: &Path, state: &SceneState, labels: Option<&[usize]>, encoding: PlyEncoding) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_to(&mut w, state, labels, encoding)?;
    w.flush()?;
    Ok(())
}

/// Bare point cloud with double `x y z`, used for repel points.
pub fn write_points_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let mut def = ElementDef::new("vertex".to_string());
    for name in ["x", "y", "z"] {
        def.properties.add(double_prop(name));
    }
    ply.header.elements.add(def);
    let rows = points
        .iter()
        .map(|p| {
            let mut row = DefaultElement::new();
            for (name, v) in ["x", "y", "z"].iter().zip(p.iter()) {
                row.insert(name.to_string(), Property::Double(*v));
            }
            row
        })
        .collect();
    ply.payload.insert("vertex".to_string(), rows);
    ply.make_consistent().map_err(|e| Error::Ply(format!("{e:?}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    Writer::new().write_ply(&mut w, &mut ply)?;
    w.flush()?;
    Ok(())
}

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        _ => return None,
    })
}

fn get(row: &DefaultElement, name: &str) -> Result<Option<f64>> {
    match row.get(name) {
        None => Ok(None),
        Some(p) => scalar(p).map(Some).ok_or_else(|| Error::Ply(format!("property `{name}` is a list"))),
    }
}

fn require(row: &DefaultElement, name: &str, i: usize) -> Result<f64> {
    get(row, name)?.ok_or_else(|| Error::Ply(format!("vertex {i} lacks `{name}`")))
}

fn color_channel(row: &DefaultElement, name: &str) -> Result<Option<f64>> {
    Ok(match row.get(name) {
        Some(Property::UChar(v)) => Some(*v as f64 / 255.0),
        Some(_) => get(row, name)?,
        None => None,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn read_ply_from<R: Read>(input: &mut R) -> Result<SceneState> {
    let ply = Parser::<DefaultElement>::new().read_ply(input).map_err(|e| Error::Ply(e.to_string()))?;
    let tag = ply
        .header
        .comments
        .iter()
        .find_map(|c| c.strip_prefix(STATE_TAG).and_then(|s| s.trim().parse::<u8>().ok()))
        .unwrap_or(0);
    let Some(def) = ply.header.elements.get("vertex") else {
        return Err(Error::Ply("no `vertex` element".into()));
    };
    let splat_layout = def.properties.contains_key("rot_0");
    let dim = (0..).take_while(|d| def.properties.contains_key(&format!("e{d}"))).count();
    let has_labels = def.properties.contains_key("label");
    let rows = ply.payload.get("vertex").map(Vec::as_slice).unwrap_or(&[]);

    let mut gaussians = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(if has_labels { rows.len() } else { 0 });
    for (i, row) in rows.iter().enumerate() {
        let center = Vec3::new(require(row, "x", i)?, require(row, "y", i)?, require(row, "z", i)?);
        let mut g = GaussianRecord::isotropic(center, 0.01, dim);
        if splat_layout {
            let q = Quaternion::new(
                require(row, "rot_0", i)?,
                require(row, "rot_1", i)?,
                require(row, "rot_2", i)?,
                require(row, "rot_3", i)?,
            );
            g.rotation = UnitQuaternion::from_quaternion(q);
            if let (Some(a), Some(b), Some(c)) = (get(row, "scale_0")?, get(row, "scale_1")?, get(row, "scale_2")?) {
                g.scale = Vec3::new(a.exp(), b.exp(), c.exp());
            }
            if let Some(o) = get(row, "opacity")? {
                g.opacity = sigmoid(o);
            }
            if let (Some(r), Some(gr), Some(b)) = (get(row, "f_dc_0")?, get(row, "f_dc_1")?, get(row, "f_dc_2")?) {
                g.color = Vec3::new(0.5 + SH_C0 * r, 0.5 + SH_C0 * gr, 0.5 + SH_C0 * b).map(|c| c.clamp(0.0, 1.0));
            }
        } else {
            if let (Some(w), Some(x), Some(y), Some(z)) = (get(row, "qw")?, get(row, "qx")?, get(row, "qy")?, get(row, "qz")?) {
                let q = Quaternion::new(w, x, y, z);
                // stored quaternions are unit already; keep them bit-exact
                g.rotation = UnitQuaternion::new_unchecked(q);
                if (q.norm() - 1.0).abs() > 1e-6 {
                    g.rotation = UnitQuaternion::from_quaternion(q);
                }
            }
            if let (Some(a), Some(b), Some(c)) = (get(row, "sx")?, get(row, "sy")?, get(row, "sz")?) {
                g.scale = Vec3::new(a, b, c);
            }
            if let Some(o) = get(row, "opacity")? {
                g.opacity = o;
            }
            if let (Some(r), Some(gr), Some(b)) =
                (color_channel(row, "red")?, color_channel(row, "green")?, color_channel(row, "blue")?)
            {
                g.color = Vec3::new(r, gr, b);
            }
        }
        for d in 0..dim {
            g.embedding[d] = require(row, &format!("e{d}"), i)?;
        }
        if has_labels {
            let l = require(row, "label", i)?;
            if !(l >= 0.0 && l.fract() == 0.0) {
                return Err(Error::Ply(format!("vertex {i} has label {l}")));
            }
            labels.push(l as usize);
        }
        gaussians.push(g);
    }
    let mut state = SceneState::new(gaussians, tag);
    if has_labels {
        state.gt_labels = Some(labels);
    }
    Ok(state)
}

pub fn read_ply(path: &Path) -> Result<SceneState> {
    let mut r = BufReader::new(File::open(path)?);
    read_ply_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_object, presets};
    use proptest::prelude::*;

    fn roundtrip(state: &SceneState, enc: PlyEncoding) -> SceneState {
        let mut buf = Vec::new();
        write_ply_to(&mut buf, state, None, enc).unwrap();
        read_ply_from(&mut buf.as_slice()).unwrap()
    }

    fn strip_transforms(s: &SceneState) -> SceneState {
        SceneState { gt_transforms: None, ..s.clone() }
    }

    #[test]
    fn empty_state_roundtrip() {
        let s = SceneState::new(Vec::new(), 1);
        let back = roundtrip(&s, PlyEncoding::BinaryLittleEndian);
        assert!(back.is_empty());
        assert_eq!(back.state_tag, 1);
    }

    #[test]
    fn synthetic_state_is_bit_exact() {
        let obj = make_object(&presets::door(2)).unwrap();
        for enc in [PlyEncoding::BinaryLittleEndian, PlyEncoding::Ascii] {
            let back = roundtrip(&obj.state1, enc);
            assert_eq!(back, strip_transforms(&obj.state1));
        }
    }

    #[test]
    fn label_override() {
        let obj = make_object(&presets::door(2)).unwrap();
        let labels = vec![3usize; obj.state0.len()];
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &obj.state0, Some(&labels), PlyEncoding::BinaryLittleEndian).unwrap();
        assert_eq!(read_ply_from(&mut buf.as_slice()).unwrap().gt_labels.unwrap(), labels);
        assert!(write_ply_to(&mut Vec::new(), &obj.state0, Some(&labels[1..]), PlyEncoding::Ascii).is_err());
    }

    #[test]
    fn third_party_ascii_points() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
                    property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n\
                    0 0 0 255 0 0\n1 2 3 0 255 0\n";
        let s = read_ply_from(&mut text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.gaussians[1].center, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(s.gaussians[0].color, Vec3::new(1.0, 0.0, 0.0));
        assert!(s.gt_labels.is_none());
    }

    #[test]
    fn splat_layout_mapping() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
                    property float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\nproperty float opacity\n\
                    property float scale_0\nproperty float scale_1\nproperty float scale_2\n\
                    property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\nend_header\n\
                    1 2 3 0 0 0 0 0 0 0 2 0 0 0\n";
        let s = read_ply_from(&mut text.as_bytes()).unwrap();
        let g = &s.gaussians[0];
        assert_eq!(g.opacity, 0.5);
        assert_eq!(g.scale, Vec3::new(1.0, 1.0, 1.0));
        assert_eq!(g.color, Vec3::new(0.5, 0.5, 0.5));
        assert!(g.rotation.angle() < 1e-12);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(read_ply_from(&mut "not a ply".as_bytes()).is_err());
        let missing_z = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n";
        assert!(matches!(read_ply_from(&mut missing_z.as_bytes()), Err(Error::Ply(_))));
        let truncated = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        assert!(read_ply_from(&mut truncated.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn finite_values_roundtrip(
            vals in proptest::collection::vec(-1e6f64..1e6, 14),
            emb in proptest::collection::vec(proptest::num::f64::NORMAL, 0..5),
            label in 0usize..1000,
        ) {
            let mut g = GaussianRecord::isotropic(Vec3::new(vals[0], vals[1], vals[2]), 1.0, emb.len());
            g.rotation = UnitQuaternion::from_quaternion(Quaternion::new(vals[3], vals[4], vals[5], vals[6] + 1e7));
            g.scale = Vec3::new(vals[7].abs(), vals[8].abs(), vals[9].abs());
            g.opacity = vals[10];
            g.color = Vec3::new(vals[11], vals[12], vals[13]);
            g.embedding = emb;
            let mut s = SceneState::new(vec![g], 0);
            s.gt_labels = Some(vec![label]);
            for enc in [PlyEncoding::BinaryLittleEndian, PlyEncoding::Ascii] {
                prop_assert_eq!(roundtrip(&s, enc), s.clone());
            }
        }
    }
}
