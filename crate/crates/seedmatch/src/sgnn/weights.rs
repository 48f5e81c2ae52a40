//! Model parameters: layout, initialization, and the SGMW weight file.
//!
//! Every learnable tensor occupies a *slot* in one canonical walk of the
//! architecture (embedding MLP, then each processing unit's pooling
//! attention, fusion MLP, self/cross filtering attention, CN branch and
//! unpooling attention, with the dustbin scalar last). Initialization,
//! serialization, and deserialization all traverse the same walk, so the
//! on-disk order can never drift from the in-memory declaration order.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bytesio::ByteCursor;
use crate::error::{Error, Result};
use crate::tensorcore::matrix::Matrix;
use crate::tensorcore::params::{ParamId, ParamSet};

/// Magic bytes of the model weight file.
pub const SGMW_MAGIC: &[u8; 4] = b"SGMW";
/// Current weight file format version.
pub const SGMW_VERSION: u32 = 1;

/// Architecture hyperparameters (everything but the learned values).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    /// Feature width d.
    pub d: usize,
    /// Attention head count h; must divide d.
    pub heads: usize,
    /// Processing units in the initial stage.
    pub initial_units: usize,
    /// Processing units in the refinement stage.
    pub refine_units: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelShape {
    /// Full-scale default: d = 128, 4 heads, 6 + 3 units.
    pub fn full() -> Self {
        ModelShape {
            d: 128,
            heads: 4,
            initial_units: 6,
            refine_units: 3,
        }
    }

    /// Validates divisibility and positivity constraints.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 {
            return Err(Error::Config(format!(
                "model shape needs d >= 1 and heads >= 1, got d={} heads={}",
                self.d, self.heads
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide feature width {}",
                self.heads, self.d
            )));
        }
        if self.initial_units == 0 || self.refine_units == 0 {
            return Err(Error::Config(format!(
                "both stages need at least one unit, got {}+{}",
                self.initial_units, self.refine_units
            )));
        }
        Ok(())
    }

    pub fn total_units(&self) -> usize {
        self.initial_units + self.refine_units
    }

    /// Closed-form scalar parameter count.
    ///
    /// Per attention block: Q/K/V projections 3(d²+d) plus MLP
    /// (2d·2d+2d)+(2d·d+d) = 9d²+6d. Per unit: four attention blocks,
    /// the fusion MLP 8d²+4d, and the CN branch
    /// (2d²+3d)+2(d²+3d)+(d+1) = 4d²+10d+1, totalling 48d²+38d+1.
    /// The embedding MLP adds d²+4d, the dustbin scalar 1.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let unit = 48 * d * d + 38 * d + 1;
        self.total_units() * unit + d * d + 4 * d + 1
    }
}

/// Parameter ids of one linear layer y = xW + b.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter ids of a two-layer MLP with one hidden ReLU.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub l1: LinearIds,
    pub l2: LinearIds,
}

/// Parameter ids of one weighted-attention block (shared-projection
/// multi-head attention plus the residual MLP).
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub mlp: MlpIds,
}

/// One context-normalization block: linear, CN, scale/shift, ReLU.
#[derive(Debug, Clone, Copy)]
pub struct CnBlockIds {
    pub linear: LinearIds,
    pub scale: ParamId,
    pub shift: ParamId,
}

/// The stacked CN branch predicting seed inlier logits.
#[derive(Debug, Clone)]
pub struct CnIds {
    pub blocks: Vec<CnBlockIds>,
    pub head: LinearIds,
}

/// All parameter ids of one processing unit, in declaration order.
#[derive(Debug, Clone)]
pub struct UnitIds {
    pub pool: AttentionIds,
    pub fusion: MlpIds,
    pub self_att: AttentionIds,
    pub cross_att: AttentionIds,
    pub cn: CnIds,
    pub unpool: AttentionIds,
}

/// Ids of every tensor in the model, mirroring the canonical walk.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub embed: MlpIds,
    /// Initial-stage units first, then refinement-stage units.
    pub units: Vec<UnitIds>,
    pub z: ParamId,
}

/// The full set of learnable parameters plus their structural layout.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub shape: ModelShape,
    pub params: ParamSet,
    pub layout: ModelLayout,
}

/// Gain applied to the Kaiming bound of residual-branch output layers
/// (the attention MLPs' second layer and the positional embedding's second
/// layer). Full-gain outputs would multiply the feature variance several
/// times per residual block; across 9 stacked units the correlations would
/// leave the numerically useful range of the Sinkhorn normalization
/// (exp saturates, gradients vanish). A small output gain keeps the
/// residual stream near its input scale at initialization.
const RESIDUAL_GAIN: f64 = 0.1;

/// What a slot holds, deciding its initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    /// Projection/MLP weight: Kaiming-uniform on fan-in (= rows).
    Weight,
    /// Output layer of a residual branch: Kaiming bound times
    /// [`RESIDUAL_GAIN`].
    ResidualWeight,
    /// Additive bias or CN shift: zero.
    Zero,
    /// CN scale: one.
    One,
    /// Dustbin score z: one.
    Dustbin,
}

/// One tensor provider: called once per slot in canonical order.
trait SlotSource {
    fn tensor(&mut self, name: &str, rows: usize, cols: usize, kind: SlotKind) -> Result<Matrix>;
}

/// Initialization source: seedable RNG, Kaiming-uniform weights.
struct InitSource {
    rng: ChaCha8Rng,
}

impl SlotSource for InitSource {
    fn tensor(&mut self, _name: &str, rows: usize, cols: usize, kind: SlotKind) -> Result<Matrix> {
        Ok(match kind {
            SlotKind::Weight | SlotKind::ResidualWeight => {
                let mut bound = (6.0 / rows as f64).sqrt();
                if kind == SlotKind::ResidualWeight {
                    bound *= RESIDUAL_GAIN;
                }
                Matrix::from_fn(rows, cols, |_, _| self.rng.random_range(-bound..bound))
            }
            SlotKind::Zero => Matrix::zeros(rows, cols),
            SlotKind::One => Matrix::filled(rows, cols, 1.0),
            SlotKind::Dustbin => Matrix::filled(rows, cols, 1.0),
        })
    }
}

/// Deserialization source: reads shape-checked tensors from a byte cursor.
struct BytesSource<'c, 'a> {
    cursor: &'c mut ByteCursor<'a>,
}

impl SlotSource for BytesSource<'_, '_> {
    fn tensor(&mut self, name: &str, rows: usize, cols: usize, _kind: SlotKind) -> Result<Matrix> {
        let got_rows = self.cursor.read_u32()? as usize;
        let got_cols = self.cursor.read_u32()? as usize;
        if got_rows != rows || got_cols != cols {
            return Err(Error::Format(format!(
                "tensor {name}: file says {got_rows}x{got_cols}, layout expects {rows}x{cols}"
            )));
        }
        let mut data = vec![0.0f64; rows * cols];
        for v in &mut data {
            *v = self.cursor.read_f64()?;
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// Walks the architecture in canonical order, registering each tensor.
struct LayoutBuilder<'a, S: SlotSource> {
    params: &'a mut ParamSet,
    source: S,
}

impl<S: SlotSource> LayoutBuilder<'_, S> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, kind: SlotKind) -> Result<ParamId> {
        let value = self.source.tensor(&name, rows, cols, kind)?;
        Ok(self.params.add(name, value))
    }

    fn linear_kind(
        &mut self,
        prefix: &str,
        fan_in: usize,
        out: usize,
        kind: SlotKind,
    ) -> Result<LinearIds> {
        Ok(LinearIds {
            w: self.tensor(format!("{prefix}.w"), fan_in, out, kind)?,
            b: self.tensor(format!("{prefix}.b"), 1, out, SlotKind::Zero)?,
        })
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, out: usize) -> Result<LinearIds> {
        self.linear_kind(prefix, fan_in, out, SlotKind::Weight)
    }

    /// An MLP whose output is added onto a residual stream: the second
    /// layer gets the damped [`SlotKind::ResidualWeight`] initialization.
    fn residual_mlp(
        &mut self,
        prefix: &str,
        input: usize,
        hidden: usize,
        out: usize,
    ) -> Result<MlpIds> {
        Ok(MlpIds {
            l1: self.linear(&format!("{prefix}.l1"), input, hidden)?,
            l2: self.linear_kind(&format!("{prefix}.l2"), hidden, out, SlotKind::ResidualWeight)?,
        })
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, out: usize) -> Result<MlpIds> {
        Ok(MlpIds {
            l1: self.linear(&format!("{prefix}.l1"), input, hidden)?,
            l2: self.linear(&format!("{prefix}.l2"), hidden, out)?,
        })
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<AttentionIds> {
        Ok(AttentionIds {
            q: self.linear(&format!("{prefix}.q"), d, d)?,
            k: self.linear(&format!("{prefix}.k"), d, d)?,
            v: self.linear(&format!("{prefix}.v"), d, d)?,
            mlp: self.residual_mlp(&format!("{prefix}.mlp"), 2 * d, 2 * d, d)?,
        })
    }

    fn cn(&mut self, prefix: &str, d: usize) -> Result<CnIds> {
        let mut blocks = Vec::with_capacity(3);
        for b in 0..3 {
            let input = if b == 0 { 2 * d } else { d };
            blocks.push(CnBlockIds {
                linear: self.linear(&format!("{prefix}.block{b}"), input, d)?,
                scale: self.tensor(format!("{prefix}.block{b}.scale"), 1, d, SlotKind::One)?,
                shift: self.tensor(format!("{prefix}.block{b}.shift"), 1, d, SlotKind::Zero)?,
            });
        }
        Ok(CnIds {
            blocks,
            head: self.linear(&format!("{prefix}.head"), d, 1)?,
        })
    }

    fn unit(&mut self, prefix: &str, d: usize) -> Result<UnitIds> {
        Ok(UnitIds {
            pool: self.attention(&format!("{prefix}.pool"), d)?,
            fusion: self.mlp(&format!("{prefix}.fusion"), 2 * d, 2 * d, 2 * d)?,
            self_att: self.attention(&format!("{prefix}.self"), d)?,
            cross_att: self.attention(&format!("{prefix}.cross"), d)?,
            cn: self.cn(&format!("{prefix}.cn"), d)?,
            unpool: self.attention(&format!("{prefix}.unpool"), d)?,
        })
    }

    fn model(&mut self, shape: &ModelShape) -> Result<ModelLayout> {
        let d = shape.d;
        // The positional embedding is summed onto unit-norm descriptors, so
        // its output layer gets the residual damping too.
        let embed = self.residual_mlp("embed", 2, d, d)?;
        let mut units = Vec::with_capacity(shape.total_units());
        for u in 0..shape.total_units() {
            let stage = if u < shape.initial_units { "init" } else { "ref" };
            let local = if u < shape.initial_units {
                u
            } else {
                u - shape.initial_units
            };
            units.push(self.unit(&format!("{stage}{local}"), d)?);
        }
        let z = self.tensor("z".into(), 1, 1, SlotKind::Dustbin)?;
        Ok(ModelLayout { embed, units, z })
    }
}

/// Builds the two attention blocks of one dense baseline layer with the
/// standard initialization. The baseline borrows the model's exact slot
/// conventions so benchmark differences isolate graph structure, not
/// initialization or implementation quality.
pub(crate) fn init_dense_attention(
    params: &mut ParamSet,
    d: usize,
    seed: u64,
) -> Result<(AttentionIds, AttentionIds)> {
    let mut builder = LayoutBuilder {
        params,
        source: InitSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
        },
    };
    let self_att = builder.attention("self", d)?;
    let cross_att = builder.attention("cross", d)?;
    Ok((self_att, cross_att))
}

impl ModelWeights {
    /// Fresh model with seeded Kaiming-uniform weights (biases and CN
    /// shifts zero, CN scales one, dustbin z = 1).
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut params = ParamSet::new();
        let mut builder = LayoutBuilder {
            params: &mut params,
            source: InitSource {
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        };
        let layout = builder.model(&shape)?;
        debug_assert_eq!(params.scalar_count(), shape.param_count());
        Ok(ModelWeights {
            shape,
            params,
            layout,
        })
    }

    /// Initial-stage unit ids.
    pub fn initial_units(&self) -> &[UnitIds] {
        &self.layout.units[..self.shape.initial_units]
    }

    /// Refinement-stage unit ids.
    pub fn refine_units(&self) -> &[UnitIds] {
        &self.layout.units[self.shape.initial_units..]
    }

    /// Serializes to SGMW bytes: magic, version, shape header, then every
    /// tensor in canonical order as rows/cols u32 + f64 little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SGMW_MAGIC);
        out.extend_from_slice(&SGMW_VERSION.to_le_bytes());
        for dim in [
            self.shape.d,
            self.shape.heads,
            self.shape.initial_units,
            self.shape.refine_units,
            self.params.len(),
        ] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for id in self.params.ids() {
            let m = self.params.value(id);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for i in 0..m.rows() {
                for &v in m.row(i) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a model from the front of `bytes`, returning it together
    /// with the number of bytes consumed (callers with appended sections
    /// continue from there; `load` demands exact consumption).
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cursor = ByteCursor { bytes, pos: 0 };
        let magic = cursor.read_exact(4)?;
        if magic != SGMW_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:02x?}, want \"SGMW\"",
                &magic[..4.min(magic.len())]
            )));
        }
        let version = cursor.read_u32()?;
        if version != SGMW_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight format version {version}, want {SGMW_VERSION}"
            )));
        }
        let shape = ModelShape {
            d: cursor.read_u32()? as usize,
            heads: cursor.read_u32()? as usize,
            initial_units: cursor.read_u32()? as usize,
            refine_units: cursor.read_u32()? as usize,
        };
        shape
            .validate()
            .map_err(|e| Error::Format(format!("invalid shape header: {e}")))?;
        let declared = cursor.read_u32()? as usize;

        let mut params = ParamSet::new();
        let mut inner = ByteCursor {
            bytes,
            pos: cursor.pos,
        };
        let mut builder = LayoutBuilder {
            params: &mut params,
            source: BytesSource {
                cursor: &mut inner,
            },
        };
        let layout = builder.model(&shape)?;
        let consumed = inner.pos;
        if declared != params.len() {
            return Err(Error::Format(format!(
                "header declares {declared} tensors, layout has {}",
                params.len()
            )));
        }
        let weights = ModelWeights {
            shape,
            params,
            layout,
        };
        if !weights.params.ids().all(|id| weights.params.value(id).all_finite()) {
            return Err(Error::Format("weight file contains non-finite values".into()));
        }
        Ok((weights, consumed))
    }

    /// Strict deserialization: the byte slice must hold exactly one model.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (weights, consumed) = Self::from_bytes_prefix(bytes)?;
        if consumed != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after model payload",
                bytes.len() - consumed
            )));
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized SGMW payload, as lowercase hex. Identifies
    /// the exact weights in match reports and checkpoints.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Current dustbin score z.
    pub fn z_value(&self) -> f64 {
        self.params.value(self.layout.z).at(0, 0)
    }
}
