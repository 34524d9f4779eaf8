//! Binary model container.
//!
//! ```text
//! magic    b"UPBM"
//! version  u32 LE (currently 1)
//! count    u32 LE, number of named arrays
//! array*   name_len u32 | name utf8 | dtype u8 (0 = f64, 1 = i64)
//!          | ndim u32 | dims u64 x ndim | data (8 bytes LE per element)
//! ```
//!
//! Required arrays: `template_vertices` (N,3) f64, `faces` (F,3) i64,
//! `shape_blendshapes` (N,3,B) f64, `joint_regressor` (K,N) f64,
//! `skinning_weights` (N,K) f64, `parents` (K) i64 with -1 for the root,
//! `part_label` (F) i64, `landmark_vertices` (L) i64, `canonical_height` () f64.
//! Optional: `pose_blendshapes` (N,3,9(K-1)) f64. Each keypoint set `name`
//! is stored as `keypoint_set/name` (P,2) i64 rows of (kind, index) where
//! kind 0 = joint and 1 = landmark, plus `keypoint_connections/name` (C,2) i64.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Vector3};

use super::{BodyModel, KeypointSetDef, KeypointSource, ModelError, ROOT_SENTINEL};

pub const MODEL_MAGIC: &[u8; 4] = b"UPBM";
pub const MODEL_VERSION: u32 = 1;

const SET_PREFIX: &str = "keypoint_set/";
const CONN_PREFIX: &str = "keypoint_connections/";

#[derive(Debug, Clone)]
enum Data {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone)]
struct Array {
    dims: Vec<usize>,
    data: Data,
}

impl Array {
    fn f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        Array { dims, data: Data::F64(data) }
    }

    fn i64(dims: Vec<usize>, data: Vec<i64>) -> Self {
        Array { dims, data: Data::I64(data) }
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BodyModel, ModelError> {
    let bytes = std::fs::read(path)?;
    read_model(&mut bytes.as_slice())
}

pub fn save_model(model: &BodyModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_model(model: &BodyModel, out: &mut impl Write) -> Result<(), ModelError> {
    let n = model.n_vertices();
    let k = model.n_joints();
    let b = model.n_shape();
    let mut arrays: Vec<(String, Array)> = Vec::new();
    arrays.push((
        "template_vertices".into(),
        Array::f64(vec![n, 3], model.template_vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect()),
    ));
    arrays.push((
        "faces".into(),
        Array::i64(vec![model.faces.len(), 3], model.faces.iter().flat_map(|f| f.map(i64::from)).collect()),
    ));
    let mut shapedirs = Vec::with_capacity(n * 3 * b);
    for v in 0..n {
        for axis in 0..3 {
            for dirs in &model.shape_blendshapes {
                shapedirs.push(dirs[v][axis]);
            }
        }
    }
    arrays.push(("shape_blendshapes".into(), Array::f64(vec![n, 3, b], shapedirs)));
    if let Some(pose) = &model.pose_blendshapes {
        let cols = 9 * (k - 1);
        let mut data = Vec::with_capacity(n * 3 * cols);
        for m in pose {
            for axis in 0..3 {
                for c in 0..cols {
                    data.push(m[(axis, c)]);
                }
            }
        }
        arrays.push(("pose_blendshapes".into(), Array::f64(vec![n, 3, cols], data)));
    }
    let mut reg = Vec::with_capacity(k * n);
    for j in 0..k {
        for v in 0..n {
            reg.push(model.joint_regressor[(j, v)]);
        }
    }
    arrays.push(("joint_regressor".into(), Array::f64(vec![k, n], reg)));
    let mut weights = vec![0.0; n * k];
    for (v, row) in model.skinning_weights.iter().enumerate() {
        for &(j, w) in row {
            weights[v * k + j] += w;
        }
    }
    arrays.push(("skinning_weights".into(), Array::f64(vec![n, k], weights)));
    arrays.push((
        "parents".into(),
        Array::i64(vec![k], model.parents.iter().map(|p| p.map_or(ROOT_SENTINEL, |p| p as i64)).collect()),
    ));
    arrays.push((
        "part_label".into(),
        Array::i64(vec![model.part_label.len()], model.part_label.iter().map(|&p| p as i64).collect()),
    ));
    arrays.push((
        "landmark_vertices".into(),
        Array::i64(vec![model.landmark_vertices.len()], model.landmark_vertices.iter().map(|&v| v as i64).collect()),
    ));
    arrays.push(("canonical_height".into(), Array::f64(vec![], vec![model.canonical_height])));
    for (name, set) in &model.keypoint_sets {
        let rows: Vec<i64> = set
            .sources
            .iter()
            .flat_map(|s| match *s {
                KeypointSource::Joint(j) => [0, j as i64],
                KeypointSource::Landmark(l) => [1, l as i64],
            })
            .collect();
        arrays.push((format!("{SET_PREFIX}{name}"), Array::i64(vec![set.sources.len(), 2], rows)));
        let conns: Vec<i64> = set.connections.iter().flat_map(|&(a, b)| [a as i64, b as i64]).collect();
        arrays.push((format!("{CONN_PREFIX}{name}"), Array::i64(vec![set.connections.len(), 2], conns)));
    }

    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, array) in &arrays {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let dtype: u8 = match array.data {
            Data::F64(_) => 0,
            Data::I64(_) => 1,
        };
        out.write_all(&[dtype])?;
        out.write_all(&(array.dims.len() as u32).to_le_bytes())?;
        for &d in &array.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        match &array.data {
            Data::F64(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
            Data::I64(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
        }
    }
    Ok(())
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], ModelError> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| ModelError::Parse(format!("truncated file while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes::<8>(what)?))
    }
}

// Guards allocation against corrupt headers.
const MAX_ELEMENTS: usize = 1 << 28;

pub fn read_model(input: &mut impl Read) -> Result<BodyModel, ModelError> {
    let mut r = Reader { inner: input };
    let magic = r.bytes::<4>("magic")?;
    if &magic != MODEL_MAGIC {
        return Err(ModelError::Parse("bad magic, not a body model file".into()));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(ModelError::Parse(format!("unsupported model version {version}")));
    }
    let count = r.u32("array count")?;
    let mut arrays: BTreeMap<String, Array> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(ModelError::Parse(format!("array name length {name_len} is implausible")));
        }
        let mut name = vec![0u8; name_len];
        r.inner
            .read_exact(&mut name)
            .map_err(|_| ModelError::Parse("truncated file while reading array name".into()))?;
        let name = String::from_utf8(name).map_err(|_| ModelError::Parse("array name is not utf-8".into()))?;
        let dtype = r.bytes::<1>("dtype")?[0];
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(ModelError::Parse(format!("array {name:?} has {ndim} dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64("dims")? as usize);
        }
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).filter(|&l| l <= MAX_ELEMENTS);
        let len = len.ok_or_else(|| ModelError::Parse(format!("array {name:?} is too large")))?;
        let what = format!("data of {name:?}");
        let data = match dtype {
            0 => Data::F64((0..len).map(|_| r.bytes::<8>(&what).map(f64::from_le_bytes)).collect::<Result<_, _>>()?),
            1 => Data::I64((0..len).map(|_| r.bytes::<8>(&what).map(i64::from_le_bytes)).collect::<Result<_, _>>()?),
            other => return Err(ModelError::Parse(format!("array {name:?} has unknown dtype {other}"))),
        };
        arrays.insert(name, Array { dims, data });
    }
    build(arrays)
}

fn take<'a>(arrays: &'a BTreeMap<String, Array>, name: &str) -> Result<&'a Array, ModelError> {
    arrays.get(name).ok_or_else(|| ModelError::Parse(format!("missing array {name:?}")))
}

fn floats<'a>(a: &'a Array, name: &str, dims: &[Option<usize>]) -> Result<&'a [f64], ModelError> {
    check_dims(a, name, dims)?;
    match &a.data {
        Data::F64(v) => Ok(v),
        Data::I64(_) => Err(ModelError::Parse(format!("array {name:?} must be f64"))),
    }
}

fn ints<'a>(a: &'a Array, name: &str, dims: &[Option<usize>]) -> Result<&'a [i64], ModelError> {
    check_dims(a, name, dims)?;
    match &a.data {
        Data::I64(v) => Ok(v),
        Data::F64(_) => Err(ModelError::Parse(format!("array {name:?} must be i64"))),
    }
}

fn check_dims(a: &Array, name: &str, dims: &[Option<usize>]) -> Result<(), ModelError> {
    let ok = a.dims.len() == dims.len() && a.dims.iter().zip(dims).all(|(&got, want)| want.map_or(true, |w| w == got));
    if ok {
        Ok(())
    } else {
        Err(ModelError::Parse(format!("array {name:?} has dims {:?}, expected {:?}", a.dims, dims)))
    }
}

fn index(v: i64, what: &str) -> Result<usize, ModelError> {
    usize::try_from(v).map_err(|_| ModelError::Invariant(format!("{what} has negative index {v}")))
}

fn build(arrays: BTreeMap<String, Array>) -> Result<BodyModel, ModelError> {
    let tv = take(&arrays, "template_vertices")?;
    let n = tv.dims.first().copied().unwrap_or(0);
    let template: Vec<Vector3<f64>> = floats(tv, "template_vertices", &[Some(n), Some(3)])?
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();

    let parents_raw = ints(take(&arrays, "parents")?, "parents", &[None])?;
    let k = parents_raw.len();
    let parents = parents_raw
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            if p == ROOT_SENTINEL {
                Ok(None)
            } else if p >= 0 && (p as usize) < k {
                Ok(Some(p as usize))
            } else {
                Err(ModelError::Invariant(format!("joint {j} has parent {p} out of range")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let fa = take(&arrays, "faces")?;
    let nf = fa.dims.first().copied().unwrap_or(0);
    let faces = ints(fa, "faces", &[Some(nf), Some(3)])?
        .chunks_exact(3)
        .enumerate()
        .map(|(f, c)| {
            let idx = |v: i64| {
                u32::try_from(v).map_err(|_| ModelError::Invariant(format!("face {f} has vertex index {v} out of range")))
            };
            Ok([idx(c[0])?, idx(c[1])?, idx(c[2])?])
        })
        .collect::<Result<Vec<_>, ModelError>>()?;

    let sd = take(&arrays, "shape_blendshapes")?;
    let nb = sd.dims.get(2).copied().unwrap_or(0);
    let sd = floats(sd, "shape_blendshapes", &[Some(n), Some(3), Some(nb)])?;
    let shape = (0..nb)
        .map(|b| (0..n).map(|v| Vector3::new(sd[(v * 3) * nb + b], sd[(v * 3 + 1) * nb + b], sd[(v * 3 + 2) * nb + b])).collect())
        .collect();

    let pose = match arrays.get("pose_blendshapes") {
        None => None,
        Some(a) => {
            let cols = 9 * k.saturating_sub(1);
            let d = floats(a, "pose_blendshapes", &[Some(n), Some(3), Some(cols)])?;
            Some((0..n).map(|v| DMatrix::from_row_slice(3, cols, &d[v * 3 * cols..(v + 1) * 3 * cols])).collect())
        }
    };

    let reg = floats(take(&arrays, "joint_regressor")?, "joint_regressor", &[Some(k), Some(n)])?;
    let regressor = DMatrix::from_row_slice(k, n, reg);

    let sw = floats(take(&arrays, "skinning_weights")?, "skinning_weights", &[Some(n), Some(k)])?;
    let skinning = sw
        .chunks_exact(k.max(1))
        .map(|row| row.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(j, w)| (j, *w)).collect())
        .collect();

    let part_label = ints(take(&arrays, "part_label")?, "part_label", &[Some(nf)])?
        .iter()
        .enumerate()
        .map(|(f, &p)| u8::try_from(p).map_err(|_| ModelError::Invariant(format!("face {f} has part label {p} out of range"))))
        .collect::<Result<Vec<_>, _>>()?;

    let landmarks = ints(take(&arrays, "landmark_vertices")?, "landmark_vertices", &[None])?
        .iter()
        .map(|&v| index(v, "landmark_vertices"))
        .collect::<Result<Vec<_>, _>>()?;

    let height = floats(take(&arrays, "canonical_height")?, "canonical_height", &[])?[0];

    let mut sets = BTreeMap::new();
    for (name, array) in arrays.range(SET_PREFIX.to_string()..) {
        let Some(set_name) = name.strip_prefix(SET_PREFIX) else { break };
        let rows = ints(array, name, &[None, Some(2)])?;
        let sources = rows
            .chunks_exact(2)
            .map(|c| match c[0] {
                0 => Ok(KeypointSource::Joint(index(c[1], name)?)),
                1 => Ok(KeypointSource::Landmark(index(c[1], name)?)),
                kind => Err(ModelError::Invariant(format!("{name} has unknown source kind {kind}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let conn_name = format!("{CONN_PREFIX}{set_name}");
        let connections = match arrays.get(&conn_name) {
            None => Vec::new(),
            Some(a) => ints(a, &conn_name, &[None, Some(2)])?
                .chunks_exact(2)
                .map(|c| Ok((index(c[0], &conn_name)?, index(c[1], &conn_name)?)))
                .collect::<Result<Vec<_>, ModelError>>()?,
        };
        sets.insert(set_name.to_string(), KeypointSetDef { sources, connections });
    }

    BodyModel::new(template, faces, shape, pose, regressor, skinning, parents, part_label, landmarks, sets, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::make_mini_model;

    #[test]
    fn mini_round_trips() {
        let model = make_mini_model();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back.template_vertices, model.template_vertices);
        assert_eq!(back.faces, model.faces);
        assert_eq!(back.keypoint_sets, model.keypoint_sets);
        assert_eq!(back.skinning_weights, model.skinning_weights);
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let mut buf = Vec::new();
        write_model(&make_mini_model(), &mut buf).unwrap();
        for cut in [0, 3, 10, buf.len() / 2, buf.len() - 1] {
            let err = read_model(&mut &buf[..cut]).unwrap_err();
            assert!(matches!(err, ModelError::Parse(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_skinning_row_is_named() {
        let model = make_mini_model();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        // Halve every weight of vertex 7 by patching the encoded array.
        let mut arrays = BTreeMap::new();
        {
            let mut cursor = buf.as_slice();
            let mut r = Reader { inner: &mut cursor };
            r.bytes::<4>("").unwrap();
            r.u32("").unwrap();
            let count = r.u32("").unwrap();
            for _ in 0..count {
                let len = r.u32("").unwrap() as usize;
                let mut name = vec![0; len];
                r.inner.read_exact(&mut name).unwrap();
                let dtype = r.bytes::<1>("").unwrap()[0];
                let ndim = r.u32("").unwrap();
                let dims: Vec<usize> = (0..ndim).map(|_| r.u64("").unwrap() as usize).collect();
                let total: usize = dims.iter().product();
                let data = if dtype == 0 {
                    Data::F64((0..total).map(|_| f64::from_le_bytes(r.bytes::<8>("").unwrap())).collect())
                } else {
                    Data::I64((0..total).map(|_| i64::from_le_bytes(r.bytes::<8>("").unwrap())).collect())
                };
                arrays.insert(String::from_utf8(name).unwrap(), Array { dims, data });
            }
        }
        if let Some(Array { data: Data::F64(w), .. }) = arrays.get_mut("skinning_weights") {
            for x in &mut w[7 * 6..8 * 6] {
                *x *= 0.5;
            }
        }
        let err = build(arrays).unwrap_err();
        assert!(err.to_string().contains("skinning row 7"), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let err = read_model(&mut &b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, ModelError::Parse(_)));
    }
}
