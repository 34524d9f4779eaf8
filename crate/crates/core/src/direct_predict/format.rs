//! Binary model file: magic, version, JSON metadata header, the forests as
//! little-endian arrays, and a trailing SHA-256 of everything before it.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DpError, DpMeta, DpModel, RegressionForest, Tree};

pub const DP_MAGIC: &[u8; 8] = b"UPFITDP\0";
pub const DP_VERSION: u32 = 1;

struct Out(Vec<u8>);

impl Out {
    fn u32(&mut self, v: usize) -> Result<(), DpError> {
        let v = u32::try_from(v).map_err(|_| DpError::Format(format!("{v} does not fit in u32")))?;
        self.0.extend(v.to_le_bytes());
        Ok(())
    }

    fn forest(&mut self, f: &RegressionForest) -> Result<(), DpError> {
        self.u32(f.input_dim)?;
        self.u32(f.output_dim)?;
        self.u32(f.trees.len())?;
        for t in &f.trees {
            self.u32(t.n_nodes())?;
            self.u32(t.values.len())?;
            for v in t.feature.iter().chain(&t.left).chain(&t.right) {
                self.0.extend(v.to_le_bytes());
            }
            for v in t.threshold.iter().chain(&t.values) {
                self.0.extend(v.to_le_bytes());
            }
        }
        Ok(())
    }
}

pub fn write_dp_model(dp: &DpModel, out: &mut impl Write) -> Result<(), DpError> {
    let header = serde_json::to_vec(&dp.meta).map_err(|e| DpError::Format(e.to_string()))?;
    let mut o = Out(Vec::new());
    o.0.extend(DP_MAGIC);
    o.0.extend(DP_VERSION.to_le_bytes());
    o.u32(header.len())?;
    o.0.extend(&header);
    o.u32(dp.joint_forests.len())?;
    for f in dp.joint_forests.iter().chain([&dp.shape_forest, &dp.depth_forest]) {
        o.forest(f)?;
    }
    let digest = Sha256::digest(&o.0);
    o.0.extend(digest);
    out.write_all(&o.0)?;
    Ok(())
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl In<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DpError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| DpError::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, DpError> {
        let n = self.u32()? as usize;
        // every counted item occupies at least one byte
        if n > self.buf.len() - self.pos {
            return Err(DpError::Format(format!("count {n} exceeds the remaining data")));
        }
        Ok(n)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, DpError> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DpError> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn forest(&mut self) -> Result<RegressionForest, DpError> {
        let input_dim = self.u32()? as usize;
        let output_dim = self.u32()? as usize;
        let n_trees = self.len()?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n = self.len()?;
            let nv = self.len()?;
            let feature = self.u32s(n)?;
            let left = self.u32s(n)?;
            let right = self.u32s(n)?;
            let threshold = self.f64s(n)?;
            let values = self.f64s(nv)?;
            let t = Tree { feature, threshold, left, right, values };
            check_tree(&t, input_dim, output_dim)?;
            trees.push(t);
        }
        Ok(RegressionForest { input_dim, output_dim, trees })
    }
}

/// Rejects trees whose indices would panic or loop at prediction time.
fn check_tree(t: &Tree, input_dim: usize, output_dim: usize) -> Result<(), DpError> {
    let n = t.n_nodes();
    let bad = |m: &str| Err(DpError::Format(format!("corrupt tree: {m}")));
    if n == 0 {
        return bad("no nodes");
    }
    let n_leaves = if output_dim == 0 { 0 } else { t.values.len() / output_dim };
    if output_dim > 0 && t.values.len() % output_dim != 0 {
        return bad("value array length");
    }
    for i in 0..n {
        if t.feature[i] == super::LEAF {
            if output_dim > 0 && t.left[i] as usize >= n_leaves {
                return bad("leaf index out of range");
            }
        } else {
            // children always follow their parent, so walks terminate
            let (l, r) = (t.left[i] as usize, t.right[i] as usize);
            if t.feature[i] as usize >= input_dim || l <= i || r <= i || l >= n || r >= n {
                return bad("split node");
            }
        }
    }
    Ok(())
}

pub fn read_dp_model(input: &mut impl Read) -> Result<DpModel, DpError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < DP_MAGIC.len() + 8 + 32 || &buf[..8] != DP_MAGIC {
        return Err(DpError::Format("not a direct-prediction model file".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(DpError::Format("checksum mismatch".into()));
    }
    let mut r = In { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != DP_VERSION {
        return Err(DpError::Format(format!("unsupported version {version}")));
    }
    let hlen = r.len()?;
    let meta: DpMeta = serde_json::from_slice(r.take(hlen)?).map_err(|e| DpError::Format(e.to_string()))?;
    let k = r.len()?;
    if k != meta.n_joints {
        return Err(DpError::Format(format!("{k} joint forests, header says {}", meta.n_joints)));
    }
    let joint_forests = (0..k).map(|_| r.forest()).collect::<Result<Vec<_>, _>>()?;
    let shape_forest = r.forest()?;
    let depth_forest = r.forest()?;
    if r.pos != body.len() {
        return Err(DpError::Format("trailing data".into()));
    }
    let d = 2 * meta.n_landmarks;
    let dims_ok = joint_forests.iter().all(|f| f.input_dim == d && f.output_dim == 9 && !f.trees.is_empty())
        && shape_forest.input_dim == d
        && shape_forest.output_dim == meta.n_shape
        && depth_forest.input_dim == d + 1
        && depth_forest.output_dim == 1
        && !depth_forest.trees.is_empty();
    if !dims_ok {
        return Err(DpError::Format("forest dimensions disagree with the header".into()));
    }
    Ok(DpModel { meta, joint_forests, shape_forest, depth_forest })
}

pub fn save_dp_model(dp: &DpModel, path: &Path) -> Result<(), DpError> {
    let mut buf = Vec::new();
    write_dp_model(dp, &mut buf)?;
    crate::util::write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_dp_model(path: &Path) -> Result<DpModel, DpError> {
    read_dp_model(&mut std::fs::File::open(path)?)
}
