//! Frame features and the image-side encoders.
//!
//! The vision backbone is an interface: features either come precomputed
//! from a binary file or are produced by the synthetic data pipeline. The
//! [`FrameEncoder`] turns one frame feature into initial embeddings for
//! every schema element using two shared type-level maps plus learned
//! per-element identity embeddings.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, MlpBlock, ParamStore, TapeBind};
use crate::schema::GraphSchema;

/// One frame's feature vector on the 1 FPS grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeature {
    pub vector: Array1<f64>,
    pub time_index: i64,
}

/// Initial embeddings for every schema element at one time point.
#[derive(Clone, Debug)]
pub struct ElementEmbedding {
    pub per_node: BTreeMap<String, Array1<f64>>,
    pub per_edge: BTreeMap<String, Array1<f64>>,
}

impl ElementEmbedding {
    /// Checks the key sets against the schema and that values are finite.
    pub fn validate_against(&self, schema: &GraphSchema) -> Result<()> {
        if self.per_node.len() != schema.nodes.len() || self.per_edge.len() != schema.edges.len() {
            return Err(Error::State(format!(
                "embedding covers {}/{} nodes and {}/{} edges",
                self.per_node.len(),
                schema.nodes.len(),
                self.per_edge.len(),
                schema.edges.len()
            )));
        }
        for n in &schema.nodes {
            let v = self
                .per_node
                .get(&n.id)
                .ok_or_else(|| Error::State(format!("missing node embedding {}", n.id)))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite embedding for {}", n.id)));
            }
        }
        for e in &schema.edges {
            let v = self
                .per_edge
                .get(&e.id)
                .ok_or_else(|| Error::State(format!("missing edge embedding {}", e.id)))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite embedding for {}", e.id)));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Precomputed-feature files
// ---------------------------------------------------------------------------

const FEATURE_MAGIC: [u8; 4] = *b"HGF1";

/// Writes features as `{magic, u32 n, u32 dim}` followed by `n * dim`
/// little-endian 32-bit floats. Frames must sit on the contiguous 1 FPS
/// grid `0..n`; the file format stores no explicit time column.
pub fn write_features(path: &Path, features: &[FrameFeature]) -> Result<()> {
    let dim = features.first().map(|f| f.vector.len()).unwrap_or(0);
    for (i, f) in features.iter().enumerate() {
        if f.vector.len() != dim {
            return Err(Error::Data(format!(
                "frame {i} has dim {} but frame 0 has dim {dim}",
                f.vector.len()
            )));
        }
        if f.time_index != i as i64 {
            return Err(Error::Data(format!(
                "frame {i} has time index {}; files require the contiguous grid 0..n",
                f.time_index
            )));
        }
    }
    let mut buf = Vec::with_capacity(12 + features.len() * dim * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&(features.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for f in features {
        for &v in f.vector.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a feature file written by [`write_features`], restoring frames in
/// time order with implicit time indices `0..n`.
pub fn load_precomputed(path: &Path) -> Result<Vec<FrameFeature>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 {
        return Err(Error::Data(format!(
            "{}: {} bytes is shorter than the 12-byte header",
            path.display(),
            bytes.len()
        )));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?}",
            path.display(),
            &bytes[..4]
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + n * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: payload is {} bytes but header (n={n}, dim={dim}) implies {}",
            path.display(),
            bytes.len() - 12,
            expected - 12
        )));
    }
    let mut features = Vec::with_capacity(n);
    let mut off = 12;
    for t in 0..n {
        let mut v = Array1::zeros(dim);
        for x in v.iter_mut() {
            *x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
        features.push(FrameFeature {
            vector: v,
            time_index: t as i64,
        });
    }
    Ok(features)
}

/// Stacks frame vectors into a `(n_frames, dim)` matrix, checking that all
/// dims agree and time indices strictly increase.
pub fn features_matrix(features: &[FrameFeature]) -> Result<Array2<f64>> {
    let dim = features.first().map(|f| f.vector.len()).unwrap_or(0);
    let mut m = Array2::zeros((features.len(), dim));
    let mut last_t = i64::MIN;
    for (i, f) in features.iter().enumerate() {
        if f.vector.len() != dim {
            return Err(Error::Shape(format!(
                "frame {i} dim {} differs from {dim}",
                f.vector.len()
            )));
        }
        if f.time_index <= last_t {
            return Err(Error::Data(format!(
                "time index {} at frame {i} does not increase",
                f.time_index
            )));
        }
        last_t = f.time_index;
        m.row_mut(i).assign(&f.vector);
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Frame encoder
// ---------------------------------------------------------------------------

/// Shared node/edge image maps plus per-element identity embeddings.
///
/// All nodes share one encoder and all edges share another; the identity
/// embedding added on top lets elements specialize without per-element
/// weight matrices.
pub struct FrameEncoder {
    pub img_node: MlpBlock,
    pub img_edge: MlpBlock,
    pub node_identity: usize,
    pub edge_identity: usize,
    pub backbone_dim: usize,
    pub hidden_dim: usize,
    n_nodes: usize,
    n_edges: usize,
}

impl FrameEncoder {
    pub fn init(
        store: &mut ParamStore,
        schema: &GraphSchema,
        backbone_dim: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Self {
        let img_node = MlpBlock::init(store, "img.node", backbone_dim, hidden_dim, hidden_dim, seed);
        let img_edge = MlpBlock::init(store, "img.edge", backbone_dim, hidden_dim, hidden_dim, seed);
        let node_identity = store.add_init(
            "id.node",
            schema.nodes.len(),
            hidden_dim,
            Init::Normal { std: 0.02 },
            seed,
            true,
        );
        let edge_identity = store.add_init(
            "id.edge",
            schema.edges.len(),
            hidden_dim,
            Init::Normal { std: 0.02 },
            seed,
            true,
        );
        FrameEncoder {
            img_node,
            img_edge,
            node_identity,
            edge_identity,
            backbone_dim,
            hidden_dim,
            n_nodes: schema.nodes.len(),
            n_edges: schema.edges.len(),
        }
    }

    /// Encodes `t_len` frames at once. Returns per-step stacked element
    /// matrices: entry `t` is `(n_nodes + n_edges, hidden_dim)` with node
    /// rows first, matching the schema's element order.
    pub fn encode_stacked(&self, tb: &mut TapeBind, feats: Var, t_len: usize) -> Vec<Var> {
        let node_codes = self.img_node.apply(tb, feats); // (t_len, d)
        let edge_codes = self.img_edge.apply(tb, feats);
        let node_id = tb.bind(self.node_identity); // (n_nodes, d)
        let edge_id = tb.bind(self.edge_identity);
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let nt = tb.g.slice_rows(node_codes, t, 1);
            let et = tb.g.slice_rows(edge_codes, t, 1);
            // broadcast the frame code over elements, then add identities
            let n_rep = tb.g.gather_rows(nt, vec![0; self.n_nodes]);
            let e_rep = tb.g.gather_rows(et, vec![0; self.n_edges]);
            let n_emb = tb.g.add(n_rep, node_id);
            let e_emb = tb.g.add(e_rep, edge_id);
            steps.push(tb.g.concat_rows(&[n_emb, e_emb]));
        }
        steps
    }
}

/// One-frame convenience wrapper producing id-keyed embeddings.
pub fn encode_frame(
    encoder: &FrameEncoder,
    store: &ParamStore,
    feature: &FrameFeature,
    schema: &GraphSchema,
) -> Result<ElementEmbedding> {
    if feature.vector.len() != encoder.backbone_dim {
        return Err(Error::Shape(format!(
            "frame feature dim {} but encoder expects {}",
            feature.vector.len(),
            encoder.backbone_dim
        )));
    }
    let mut g = Graph::new();
    let mut tb = TapeBind::eval(&mut g, store);
    let feats = tb
        .g
        .constant(feature.vector.clone().insert_axis(ndarray::Axis(0)));
    let steps = encoder.encode_stacked(&mut tb, feats, 1);
    let stacked = g.value_of(steps[0]).clone();
    let mut per_node = BTreeMap::new();
    for (i, n) in schema.nodes.iter().enumerate() {
        per_node.insert(n.id.clone(), stacked.row(i).to_owned());
    }
    let mut per_edge = BTreeMap::new();
    for (i, e) in schema.edges.iter().enumerate() {
        per_edge.insert(e.id.clone(), stacked.row(schema.nodes.len() + i).to_owned());
    }
    let out = ElementEmbedding { per_node, per_edge };
    out.validate_against(schema)?;
    Ok(out)
}
