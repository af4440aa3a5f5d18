//! Per-block neural decoder: three small MLP heads turn an anchor feature
//! plus viewing direction and normalized distance into `k_offsets` Gaussians.
//!
//! Head layout per decoded Gaussian j:
//!   opacity head    -> 1 logit, sigmoid
//!   color head      -> 3 logits, sigmoid
//!   covariance head -> 7 values: 3 log-scales (clamped to [-8, 3] before
//!                      exp) then 4 quaternion components; the w component is
//!                      biased by +1 before normalization so a zero network
//!                      decodes the identity rotation.
//!
//! Positions never see the network: position_j = anchor.position +
//! offsets_j ∘ scaling, so they are identical from every viewpoint (block
//! fusion votes on decoded centers and needs them view-independent).

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, Gaussian3DGrad};
use crate::octree::Anchor;

/// Log-scale clamp bounds: decoded scale stays in [e^-8, e^3].
pub const LOG_SCALE_MIN: f64 = -8.0;
pub const LOG_SCALE_MAX: f64 = 3.0;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two fully connected layers with a ReLU in between. Also used as its own
/// gradient container (same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Mlp2 {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, input),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(output, hidden),
            b2: DVector::zeros(output),
        }
    }

    /// Uniform init in ±1/sqrt(fan_in), weights and biases alike.
    fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let fill = |rows: usize, cols: usize, bound: f64, rng: &mut dyn rand::RngCore| {
            DMatrix::from_iterator(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)))
        };
        let b1 = 1.0 / (input as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: fill(hidden, input, b1, rng),
            b1: DVector::from_iterator(hidden, (0..hidden).map(|_| rng.gen_range(-b1..b1))),
            w2: fill(output, hidden, b2, rng),
            b2: DVector::from_iterator(output, (0..output).map(|_| rng.gen_range(-b2..b2))),
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let h = (&self.w1 * x + &self.b1).map(|v| v.max(0.0));
        &self.w2 * h + &self.b2
    }

    /// Gradients of the two layers plus the input, given upstream d_y.
    pub fn backward(&self, x: &DVector<f64>, d_y: &DVector<f64>) -> (Mlp2, DVector<f64>) {
        let pre = &self.w1 * x + &self.b1;
        let h = pre.map(|v| v.max(0.0));
        let d_w2 = d_y * h.transpose();
        let d_b2 = d_y.clone();
        let d_h = self.w2.transpose() * d_y;
        let d_pre =
            DVector::from_iterator(pre.len(), pre.iter().zip(d_h.iter()).map(|(p, d)| {
                if *p > 0.0 {
                    *d
                } else {
                    0.0
                }
            }));
        let d_w1 = &d_pre * x.transpose();
        let d_b1 = d_pre.clone();
        let d_x = self.w1.transpose() * d_pre;
        (Mlp2 { w1: d_w1, b1: d_b1, w2: d_w2, b2: d_b2 }, d_x)
    }

    fn accumulate(&mut self, other: &Mlp2) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    fn write_to(&self, w: &mut ByteWriter) {
        for m in [&self.w1, &self.w2] {
            w.u64(m.nrows() as u64);
            w.u64(m.ncols() as u64);
            w.f64s(m.iter().copied()); // column-major
        }
        for v in [&self.b1, &self.b2] {
            w.u64(v.len() as u64);
            w.f64s(v.iter().copied());
        }
    }

    fn read_from(r: &mut ByteReader) -> Result<Self> {
        let mut mats = Vec::with_capacity(2);
        for _ in 0..2 {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            mats.push(DMatrix::from_iterator(rows, cols, r.f64s(rows * cols)?.into_iter()));
        }
        let mut vecs = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = r.u64()? as usize;
            vecs.push(DVector::from_vec(r.f64s(n)?));
        }
        let w2 = mats.pop().unwrap();
        let w1 = mats.pop().unwrap();
        let b2 = vecs.pop().unwrap();
        let b1 = vecs.pop().unwrap();
        Ok(Self { w1, b1, w2, b2 })
    }
}

/// The three decoder heads for one block, plus the distance normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub block_id: u32,
    pub feature_dim: usize,
    pub hidden: usize,
    pub k_offsets: usize,
    /// Divides the anchor–camera distance before it enters the heads
    /// (set to the block's d_max).
    pub dist_norm: f64,
    pub opacity: Mlp2,
    pub color: Mlp2,
    pub cov: Mlp2,
}

/// Gradient accumulator shaped like the decoder heads.
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub opacity: Mlp2,
    pub color: Mlp2,
    pub cov: Mlp2,
}

impl DecoderGrads {
    pub fn zeros(weights: &DecoderWeights) -> Self {
        let input = weights.feature_dim + 4;
        let (h, k) = (weights.hidden, weights.k_offsets);
        Self {
            opacity: Mlp2::zeros(input, h, k),
            color: Mlp2::zeros(input, h, 3 * k),
            cov: Mlp2::zeros(input, h, 7 * k),
        }
    }

    pub fn accumulate(&mut self, other: &DecoderGrads) {
        self.opacity.accumulate(&other.opacity);
        self.color.accumulate(&other.color);
        self.cov.accumulate(&other.cov);
    }
}

/// The `k_offsets` Gaussians decoded from one anchor.
#[derive(Debug, Clone)]
pub struct DecodedGaussians {
    pub anchor_id: u64,
    pub block_id: u32,
    pub gaussians: Vec<Gaussian3D>,
}

/// Deterministic uniform initialization. The RNG stream depends only on the
/// seed, so two blocks initialized with the same seed carry identical weights
/// under distinct block tags.
pub fn init_weights(
    seed: u64,
    block_id: u32,
    feature_dim: usize,
    hidden: usize,
    k_offsets: usize,
    dist_norm: f64,
) -> DecoderWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = feature_dim + 4;
    DecoderWeights {
        block_id,
        feature_dim,
        hidden,
        k_offsets,
        dist_norm,
        opacity: Mlp2::init(input, hidden, k_offsets, &mut rng),
        color: Mlp2::init(input, hidden, 3 * k_offsets, &mut rng),
        cov: Mlp2::init(input, hidden, 7 * k_offsets, &mut rng),
    }
}

fn head_input(anchor: &Anchor, camera_center: &Vector3<f64>, w: &DecoderWeights) -> DVector<f64> {
    let rel = anchor.position - camera_center;
    let d = rel.norm();
    let dir = if d > 0.0 { rel / d } else { Vector3::zeros() };
    let mut x = DVector::zeros(w.feature_dim + 4);
    x.rows_mut(0, w.feature_dim).copy_from(&anchor.feature);
    x[w.feature_dim] = dir.x;
    x[w.feature_dim + 1] = dir.y;
    x[w.feature_dim + 2] = dir.z;
    x[w.feature_dim + 3] = d / w.dist_norm;
    x
}

fn check_shapes(anchor: &Anchor, w: &DecoderWeights) -> Result<()> {
    if anchor.feature.len() != w.feature_dim || anchor.offsets.len() != w.k_offsets {
        return Err(Error::Shape(format!(
            "anchor {} has feature {} / offsets {}, decoder expects {} / {}",
            anchor.id,
            anchor.feature.len(),
            anchor.offsets.len(),
            w.feature_dim,
            w.k_offsets
        )));
    }
    Ok(())
}

/// Decode one anchor for a camera position. Pure function of its inputs;
/// positions ignore the camera entirely.
pub fn decode(
    anchor: &Anchor,
    camera_center: &Vector3<f64>,
    weights: &DecoderWeights,
) -> Result<DecodedGaussians> {
    check_shapes(anchor, weights)?;
    let x = head_input(anchor, camera_center, weights);
    let o = weights.opacity.forward(&x);
    let c = weights.color.forward(&x);
    let v = weights.cov.forward(&x);
    let k = weights.k_offsets;
    let mut gaussians = Vec::with_capacity(k);
    for j in 0..k {
        let scale = Vector3::new(
            v[7 * j].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp(),
            v[7 * j + 1].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp(),
            v[7 * j + 2].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp(),
        );
        let q_raw = Vector4::new(1.0 + v[7 * j + 3], v[7 * j + 4], v[7 * j + 5], v[7 * j + 6]);
        let q = q_raw / q_raw.norm();
        gaussians.push(Gaussian3D {
            mean: anchor.position + anchor.offsets[j].component_mul(&anchor.scaling),
            scale,
            rotation: [q[0], q[1], q[2], q[3]],
            opacity: sigmoid(o[j]),
            color: Vector3::new(sigmoid(c[3 * j]), sigmoid(c[3 * j + 1]), sigmoid(c[3 * j + 2])),
        });
    }
    Ok(DecodedGaussians { anchor_id: anchor.id, block_id: weights.block_id, gaussians })
}

/// Exact adjoint of `decode`: upstream per-Gaussian gradients map to head
/// gradients plus gradients for the anchor's learnable feature, offsets and
/// scaling. Must be called with the same inputs as the forward pass.
pub fn decoder_backward(
    anchor: &Anchor,
    camera_center: &Vector3<f64>,
    weights: &DecoderWeights,
    d_gaussians: &[Gaussian3DGrad],
) -> Result<(DecoderGrads, DVector<f64>, Vec<Vector3<f64>>, Vector3<f64>)> {
    check_shapes(anchor, weights)?;
    let k = weights.k_offsets;
    if d_gaussians.len() != k {
        return Err(Error::Shape(format!(
            "{} upstream gradients for k_offsets = {}",
            d_gaussians.len(),
            k
        )));
    }
    let x = head_input(anchor, camera_center, weights);
    let o = weights.opacity.forward(&x);
    let c = weights.color.forward(&x);
    let v = weights.cov.forward(&x);

    let mut d_o = DVector::zeros(k);
    let mut d_c = DVector::zeros(3 * k);
    let mut d_v = DVector::zeros(7 * k);
    let mut d_offsets = vec![Vector3::zeros(); k];
    let mut d_scaling = Vector3::zeros();

    for (j, dg) in d_gaussians.iter().enumerate() {
        // position_j = anchor.position + offsets_j ∘ scaling
        d_offsets[j] = dg.d_mean.component_mul(&anchor.scaling);
        d_scaling += dg.d_mean.component_mul(&anchor.offsets[j]);

        let so = sigmoid(o[j]);
        d_o[j] = dg.d_opacity * so * (1.0 - so);
        for a in 0..3 {
            let sc = sigmoid(c[3 * j + a]);
            d_c[3 * j + a] = dg.d_color[a] * sc * (1.0 - sc);
        }
        // scale = exp(clamp(h, min, max)); gradient passes inside the clamp
        for a in 0..3 {
            let h = v[7 * j + a];
            if (LOG_SCALE_MIN..=LOG_SCALE_MAX).contains(&h) {
                d_v[7 * j + a] = dg.d_scale[a] * h.exp();
            }
        }
        // q = q_raw/|q_raw| with q_raw = (1+h0, h1, h2, h3):
        // d_raw = (I - q qᵀ) d_q / |q_raw|
        let q_raw = Vector4::new(1.0 + v[7 * j + 3], v[7 * j + 4], v[7 * j + 5], v[7 * j + 6]);
        let n = q_raw.norm();
        let q = q_raw / n;
        let d_q = Vector4::new(
            dg.d_rotation[0],
            dg.d_rotation[1],
            dg.d_rotation[2],
            dg.d_rotation[3],
        );
        let d_raw = (d_q - q * q.dot(&d_q)) / n;
        for a in 0..4 {
            d_v[7 * j + 3 + a] = d_raw[a];
        }
    }

    let (g_o, dx_o) = weights.opacity.backward(&x, &d_o);
    let (g_c, dx_c) = weights.color.backward(&x, &d_c);
    let (g_v, dx_v) = weights.cov.backward(&x, &d_v);
    let d_x = dx_o + dx_c + dx_v;
    // only the feature slice of the input is learnable; direction and
    // distance are functions of the fixed anchor position
    let d_feature = d_x.rows(0, weights.feature_dim).clone_owned();

    Ok((DecoderGrads { opacity: g_o, color: g_c, cov: g_v }, d_feature, d_offsets, d_scaling))
}

const DECODER_MAGIC: &[u8; 4] = b"DECW";
const DECODER_VERSION: u32 = 1;

/// Layout: magic, version, block_id u32, feature_dim/hidden/k_offsets u64,
/// dist_norm f64, then opacity/color/cov heads, each as w1, w2 (rows, cols,
/// column-major data) followed by b1, b2 (len, data).
pub fn write_decoder(weights: &DecoderWeights, w: &mut ByteWriter) {
    w.magic(DECODER_MAGIC);
    w.u32(DECODER_VERSION);
    w.u32(weights.block_id);
    w.u64(weights.feature_dim as u64);
    w.u64(weights.hidden as u64);
    w.u64(weights.k_offsets as u64);
    w.f64(weights.dist_norm);
    weights.opacity.write_to(w);
    weights.color.write_to(w);
    weights.cov.write_to(w);
}

pub fn read_decoder(r: &mut ByteReader) -> Result<DecoderWeights> {
    r.magic(DECODER_MAGIC)?;
    r.version(DECODER_VERSION)?;
    let block_id = r.u32()?;
    let feature_dim = r.u64()? as usize;
    let hidden = r.u64()? as usize;
    let k_offsets = r.u64()? as usize;
    let dist_norm = r.f64()?;
    let opacity = Mlp2::read_from(r)?;
    let color = Mlp2::read_from(r)?;
    let cov = Mlp2::read_from(r)?;
    Ok(DecoderWeights { block_id, feature_dim, hidden, k_offsets, dist_norm, opacity, color, cov })
}
