//! Per-point MLP encoder `9 -> H -> H -> C` with ReLU hidden layers and
//! hand-written reverse mode.
//!
//! Input features per point: xyz centered on the scene centroid and divided by
//! the largest bounding-box side, the point's rgb, and the scene-mean rgb.
//!
//! Checkpoints use the `EPCK` layout (little-endian):
//!
//! ```text
//! "EPCK" | version: u32 (=1) | layers: u32 | per layer: in: u32, out: u32,
//!        in x out f64 weights (row-major), out f64 biases
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{matmul, matmul_tn, Matrix};
use crate::pointcloud::PointCloud;
use crate::rng::RngStream;

pub const INPUT_DIM: usize = 9;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_CHANNELS: usize = 32;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`; the layer computes `x·W + b`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Parameter gradients share the parameter layout.
pub type MlpGrads = MlpParams;

impl MlpParams {
    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    /// Flat views of every weight and bias, in checkpoint order.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += k * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &MlpParams, k: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }

    fn check_chain(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::Shape {
                    op: "MlpParams",
                    left: w[0].weight.shape(),
                    right: w[1].weight.shape(),
                });
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape {
                    op: "MlpParams bias",
                    left: l.weight.shape(),
                    right: (1, l.bias.len()),
                });
            }
        }
        Ok(())
    }
}

/// Uniform `±sqrt(6 / fan_in)` weights, zero biases.
pub fn encoder_init(d_in: usize, hidden: usize, c_out: usize, seed: u64) -> Result<MlpParams> {
    if d_in == 0 || hidden == 0 || c_out == 0 {
        return Err(Error::InvalidParam(format!(
            "encoder dims must be >= 1, got {d_in}/{hidden}/{c_out}"
        )));
    }
    let mut rng = RngStream::new(seed);
    let dims = [d_in, hidden, hidden, c_out];
    let layers = dims
        .windows(2)
        .map(|w| {
            let bound = (6.0 / w[0] as f64).sqrt();
            Layer {
                weight: Matrix::from_fn(w[0], w[1], |_, _| rng.uniform(-bound, bound)),
                bias: vec![0.0; w[1]],
            }
        })
        .collect();
    Ok(MlpParams { layers })
}

/// The `N x 9` encoder input for a cloud.
pub fn encoder_inputs(cloud: &PointCloud) -> Matrix {
    let n = cloud.len();
    let center = cloud.centroid();
    let pos = cloud.positions();
    let col = cloud.colors();
    let mut extent: f64 = 0.0;
    for k in 0..3 {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(pos.get(i, k)), hi.max(pos.get(i, k)))
        });
        extent = extent.max(hi - lo);
    }
    if extent <= 0.0 {
        extent = 1.0;
    }
    let mut mean_rgb = [0.0; 3];
    for i in 0..n {
        for k in 0..3 {
            mean_rgb[k] += col.get(i, k);
        }
    }
    let mean_rgb = mean_rgb.map(|v| v / n as f64);
    Matrix::from_fn(n, INPUT_DIM, |i, k| match k {
        0..=2 => (pos.get(i, k) - center[k]) / extent,
        3..=5 => col.get(i, k - 3),
        _ => mean_rgb[k - 6],
    })
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    input: Matrix,
    /// Pre-activations of each hidden layer.
    pre: Vec<Matrix>,
    /// Post-ReLU outputs of each hidden layer.
    post: Vec<Matrix>,
}

impl ActivationCache {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

fn affine(x: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut z = matmul(x, &layer.weight)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

/// Forward pass on precomputed inputs.
pub fn forward_features(params: &MlpParams, input: &Matrix) -> Result<(Matrix, ActivationCache)> {
    params.check_chain()?;
    if input.cols() != params.input_dim() {
        return Err(Error::Shape {
            op: "encoder_forward",
            left: input.shape(),
            right: params.layers[0].weight.shape(),
        });
    }
    let mut pre = Vec::new();
    let mut post = Vec::new();
    let mut h = input.clone();
    let last = params.layers.len() - 1;
    for (idx, layer) in params.layers.iter().enumerate() {
        let z = affine(&h, layer)?;
        if idx == last {
            return Ok((
                z,
                ActivationCache {
                    input: input.clone(),
                    pre,
                    post,
                },
            ));
        }
        let mut a = z.clone();
        a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        pre.push(z);
        post.push(a.clone());
        h = a;
    }
    unreachable!("encoder has at least one layer")
}

pub fn encoder_forward(params: &MlpParams, cloud: &PointCloud) -> Result<(Matrix, ActivationCache)> {
    forward_features(params, &encoder_inputs(cloud))
}

/// Exact parameter gradients given `∂L/∂embedding`.
pub fn encoder_backward(
    params: &MlpParams,
    cache: &ActivationCache,
    grad_embedding: &Matrix,
) -> Result<MlpGrads> {
    let depth = params.layers.len();
    if cache.pre.len() + 1 != depth {
        return Err(Error::Cache(format!(
            "cache has {} hidden layers, parameters have {}",
            cache.pre.len(),
            depth - 1
        )));
    }
    for (z, layer) in cache.pre.iter().zip(&params.layers) {
        if z.cols() != layer.fan_out() {
            return Err(Error::Cache(format!(
                "cached activation width {} does not match layer width {}",
                z.cols(),
                layer.fan_out()
            )));
        }
    }
    if cache.input.cols() != params.input_dim() {
        return Err(Error::Cache("cached input width does not match parameters".into()));
    }
    let n = cache.input.rows();
    if grad_embedding.shape() != (n, params.output_dim()) {
        return Err(Error::Shape {
            op: "encoder_backward",
            left: grad_embedding.shape(),
            right: (n, params.output_dim()),
        });
    }

    let mut grads = params.zeros_like();
    let mut upstream = grad_embedding.clone();
    for idx in (0..depth).rev() {
        let layer_in = if idx == 0 {
            &cache.input
        } else {
            &cache.post[idx - 1]
        };
        grads.layers[idx].weight = matmul_tn(layer_in, &upstream)?;
        let bias = &mut grads.layers[idx].bias;
        for r in 0..upstream.rows() {
            for (b, g) in bias.iter_mut().zip(upstream.row(r)) {
                *b += g;
            }
        }
        if idx == 0 {
            break;
        }
        // ∂L/∂h = upstream · Wᵀ, then through the ReLU of layer idx-1
        let w = &params.layers[idx].weight;
        let mut down = Matrix::zeros(upstream.rows(), w.rows());
        for r in 0..upstream.rows() {
            let g = upstream.row(r);
            let z = cache.pre[idx - 1].row(r);
            let out = down.row_mut(r);
            for (i, o) in out.iter_mut().enumerate() {
                if z[i] > 0.0 {
                    *o = crate::numcore::dot(w.row(i), g);
                }
            }
        }
        upstream = down;
    }
    Ok(grads)
}

pub fn encode_checkpoint(params: &MlpParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + params.layers.len() * 8 + params.num_params() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        buf.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
        for v in layer.weight.as_slice().iter().chain(&layer.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MlpParams> {
    struct Reader<'a> {
        bytes: &'a [u8],
        at: usize,
    }
    impl Reader<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            if self.at + n > self.bytes.len() {
                return Err(Error::Length {
                    expected: self.at + n,
                    actual: self.bytes.len(),
                });
            }
            let out = &self.bytes[self.at..self.at + n];
            self.at += n;
            Ok(out)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
            Ok(self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }

    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, expected \"EPCK\"".into()));
    }
    let mut r = Reader { bytes, at: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::Format("checkpoint has no layers".into()));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let fan_in = r.u32()? as usize;
        let fan_out = r.u32()? as usize;
        let weight = Matrix::from_vec(fan_in, fan_out, r.f64s(fan_in * fan_out)?)?;
        let bias = r.f64s(fan_out)?;
        layers.push(Layer { weight, bias });
    }
    if r.at != bytes.len() {
        return Err(Error::Length {
            expected: r.at,
            actual: bytes.len(),
        });
    }
    let params = MlpParams { layers };
    params.check_chain()?;
    Ok(params)
}

pub fn save_checkpoint(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// SHA-256 of the checkpoint encoding, hex.
pub fn checkpoint_digest(params: &MlpParams) -> String {
    Sha256::digest(encode_checkpoint(params))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error, FD_STEP};
    use crate::numcore::dot;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut s = RngStream::new(seed);
        PointCloud::new(
            Matrix::from_fn(n, 3, |_, _| s.uniform(-2.0, 2.0)),
            Matrix::from_fn(n, 3, |_, _| s.uniform(0.0, 1.0)),
            None,
        )
        .unwrap()
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let p = encoder_init(9, 16, 8, 3).unwrap();
        for l in &p.layers {
            assert!(l.bias.iter().all(|b| *b == 0.0));
            let bound = (6.0 / l.fan_in() as f64).sqrt();
            assert!(l.weight.as_slice().iter().all(|w| w.abs() <= bound));
        }
        assert_eq!(p, encoder_init(9, 16, 8, 3).unwrap());
        assert_ne!(p, encoder_init(9, 16, 8, 4).unwrap());
        assert!(encoder_init(9, 0, 8, 1).is_err());
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let p = encoder_init(9, 8, 4, 1).unwrap().zeros_like();
        let (emb, _) = encoder_forward(&p, &cloud(10, 1)).unwrap();
        assert!(emb.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inputs_layout() {
        let c = cloud(6, 2);
        let x = encoder_inputs(&c);
        assert_eq!(x.shape(), (6, 9));
        for k in 0..3 {
            let mean: f64 = (0..6).map(|i| x.get(i, k)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
        }
        assert_eq!(&x.row(2)[3..6], c.colors().row(2));
        assert_eq!(&x.row(0)[6..], &x.row(5)[6..]);
    }

    #[test]
    fn forward_matches_per_point_loop() {
        let p = encoder_init(9, 12, 5, 7).unwrap();
        let c = cloud(9, 3);
        let (emb, _) = encoder_forward(&p, &c).unwrap();
        let x = encoder_inputs(&c);
        for i in 0..9 {
            let mut h = x.row(i).to_vec();
            for (li, layer) in p.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.fan_out()];
                for (o, nv) in next.iter_mut().enumerate() {
                    let col: Vec<f64> = (0..layer.fan_in()).map(|k| layer.weight.get(k, o)).collect();
                    *nv = dot(&h, &col) + layer.bias[o];
                    if li + 1 < p.layers.len() {
                        *nv = nv.max(0.0);
                    }
                }
                h = next;
            }
            for (a, b) in emb.row(i).iter().zip(&h) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let p = encoder_init(9, 12, 5, 8).unwrap();
        let c = cloud(7, 4);
        let order = [3, 0, 6, 1, 5, 2, 4];
        let (base, _) = encoder_forward(&p, &c).unwrap();
        let (perm, _) = encoder_forward(&p, &c.permuted(&order)).unwrap();
        for (r, &src) in order.iter().enumerate() {
            for k in 0..5 {
                assert!((perm.get(r, k) - base.get(src, k)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = encoder_init(9, 8, 4, 2).unwrap();
        let (emb, cache) = encoder_forward(&p, &cloud(5, 5)).unwrap();
        let g = encoder_backward(&p, &cache, &Matrix::zeros(emb.rows(), emb.cols())).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let p = encoder_init(9, 8, 4, 2).unwrap();
        let other = encoder_init(9, 6, 4, 2).unwrap();
        let (emb, cache) = encoder_forward(&other, &cloud(5, 5)).unwrap();
        assert!(matches!(
            encoder_backward(&p, &cache, &Matrix::zeros(emb.rows(), emb.cols())),
            Err(Error::Cache(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = encoder_init(9, 8, 4, 11).unwrap();
        let c = cloud(8, 6);
        let x = encoder_inputs(&c);
        let mut s = RngStream::new(12);
        let probe = Matrix::from_fn(8, 4, |_, _| s.standard_normal());
        // scalar objective <probe, f(x)>
        let objective = |params: &MlpParams| -> f64 {
            let (e, _) = forward_features(params, &x).unwrap();
            dot(e.as_slice(), probe.as_slice())
        };
        let (_, cache) = forward_features(&p, &x).unwrap();
        let grads = encoder_backward(&p, &cache, &probe).unwrap();
        for (li, layer) in p.layers.iter().enumerate() {
            let fd_w = central_difference(&layer.weight, FD_STEP, |w| {
                let mut q = p.clone();
                q.layers[li].weight = w.clone();
                Ok::<_, ()>(objective(&q))
            })
            .unwrap();
            assert!(relative_error(grads.layers[li].weight.as_slice(), fd_w.as_slice()) < 1e-5);
            let bias = Matrix::from_vec(1, layer.fan_out(), layer.bias.clone()).unwrap();
            let fd_b = central_difference(&bias, FD_STEP, |b| {
                let mut q = p.clone();
                q.layers[li].bias = b.as_slice().to_vec();
                Ok::<_, ()>(objective(&q))
            })
            .unwrap();
            assert!(relative_error(&grads.layers[li].bias, fd_b.as_slice()) < 1e-5);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = encoder_init(9, 6, 3, 1).unwrap();
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..4], b"EPCK");
        assert_eq!(bytes.len(), 12 + 3 * 8 + p.num_params() * 8);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Length { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert_eq!(checkpoint_digest(&p), checkpoint_digest(&p.clone()));
        assert_eq!(checkpoint_digest(&p).len(), 64);
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let p = encoder_init(9, 4, 2, 3).unwrap();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        assert!(matches!(load_checkpoint(dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
