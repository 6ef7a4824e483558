//! Point cloud data model, the ASCII and `EPCC` binary formats, and the
//! scale/rotate/jitter augmentation that produces two views of one scene.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! "EPCC" | version: u32 (=1) | n: u64 | has_labels: u8 | n x 6 f32 (x y z r g b) | [n x u32 labels]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::{tags, RngStream};

pub const BINARY_MAGIC: &[u8; 4] = b"EPCC";
pub const BINARY_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 8 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Matrix,
    colors: Matrix,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(positions: Matrix, colors: Matrix, labels: Option<Vec<u32>>) -> Result<Self> {
        if positions.cols() != 3 || colors.cols() != 3 || positions.rows() != colors.rows() {
            return Err(Error::Shape {
                op: "PointCloud::new",
                left: positions.shape(),
                right: colors.shape(),
            });
        }
        if positions.rows() == 0 {
            return Err(Error::InvalidParam("point cloud needs at least one point".into()));
        }
        if !positions.is_finite() || !colors.is_finite() {
            return Err(Error::Range("non-finite coordinate or color".into()));
        }
        if let Some(i) = colors.as_slice().iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Range(format!(
                "color component {} of point {} is outside [0, 1]",
                colors.as_slice()[i],
                i / 3
            )));
        }
        if let Some(l) = &labels {
            if l.len() != positions.rows() {
                return Err(Error::InvalidParam(format!(
                    "{} labels for {} points",
                    l.len(),
                    positions.rows()
                )));
            }
        }
        Ok(Self {
            positions,
            colors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    pub fn colors(&self) -> &Matrix {
        &self.colors
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for r in 0..self.len() {
            for (k, v) in self.positions.row(r).iter().enumerate() {
                c[k] += v;
            }
        }
        c.map(|v| v / self.len() as f64)
    }

    /// Same points in a new order: point `i` of the result is point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> PointCloud {
        let pos = Matrix::from_fn(order.len(), 3, |r, c| self.positions.get(order[r], c));
        let col = Matrix::from_fn(order.len(), 3, |r, c| self.colors.get(order[r], c));
        let labels = self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect());
        PointCloud {
            positions: pos,
            colors: col,
            labels,
        }
    }
}

pub fn load_ascii(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ascii(&text)
}

/// Parses `x y z r g b [label]` lines; `#` starts a comment line.
pub fn parse_ascii(text: &str) -> Result<PointCloud> {
    let mut pos = Vec::new();
    let mut col = Vec::new();
    let mut labels = Vec::new();
    let mut labeled: Option<bool> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let has_label = match fields.len() {
            6 => false,
            7 => true,
            n => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 6 or 7 fields, found {n}"),
                })
            }
        };
        match labeled {
            None => labeled = Some(has_label),
            Some(prev) if prev != has_label => {
                return Err(Error::Format(format!(
                    "line {line_no}: mixed labeled and unlabeled points"
                )))
            }
            _ => {}
        }
        for (k, f) in fields[..6].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid number {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value {f:?}"),
                });
            }
            if k < 3 {
                pos.push(v);
            } else {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Range(format!(
                        "line {line_no}: color component {v} is outside [0, 1]"
                    )));
                }
                col.push(v);
            }
        }
        if has_label {
            labels.push(fields[6].parse::<u32>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid label {:?}", fields[6]),
            })?);
        }
    }

    let n = pos.len() / 3;
    if n == 0 {
        return Err(Error::Format("no points in input".into()));
    }
    PointCloud::new(
        Matrix::from_vec(n, 3, pos)?,
        Matrix::from_vec(n, 3, col)?,
        labeled.unwrap_or(false).then_some(labels),
    )
}

pub fn to_ascii(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for i in 0..cloud.len() {
        let p = cloud.positions.row(i);
        let c = cloud.colors.row(i);
        let _ = write!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
        if let Some(l) = &cloud.labels {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn save_ascii(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_ascii(cloud)).map_err(|e| Error::io(path, e))
}

/// Size in bytes of the binary encoding of an `n`-point cloud.
pub fn binary_size(n: usize, has_labels: bool) -> usize {
    HEADER_BYTES + n * 6 * 4 + if has_labels { n * 4 } else { 0 }
}

pub fn encode_binary(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut buf = Vec::with_capacity(binary_size(n, cloud.labels.is_some()));
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.push(u8::from(cloud.labels.is_some()));
    for i in 0..n {
        for v in cloud.positions.row(i).iter().chain(cloud.colors.row(i)) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(labels) = &cloud.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    buf
}

pub fn decode_binary(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 4 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Format("bad magic, expected \"EPCC\"".into()));
    }
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Length {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let has_labels = match bytes[16] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("has_labels byte must be 0 or 1, found {b}"))),
    };
    let expected = binary_size(n, has_labels);
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let mut floats = bytes[HEADER_BYTES..HEADER_BYTES + n * 24]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut pos = Vec::with_capacity(n * 3);
    let mut col = Vec::with_capacity(n * 3);
    for _ in 0..n {
        pos.extend(floats.by_ref().take(3));
        col.extend(floats.by_ref().take(3));
    }
    let labels = has_labels.then(|| {
        bytes[HEADER_BYTES + n * 24..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    PointCloud::new(
        Matrix::from_vec(n, 3, pos)?,
        Matrix::from_vec(n, 3, col)?,
        labels,
    )
}

pub fn save_binary(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_binary(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_binary(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::InvalidParam(format!("unknown axis {s:?}"))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// Augmentation strengths. `rot_max` bounds the rotation angle, drawn from
/// `[0, rot_max)`; the full turn is the default.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub scale_min: f64,
    pub scale_max: f64,
    pub rot_axis: Axis,
    pub rot_max: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_min: 0.8,
            scale_max: 1.2,
            rot_axis: Axis::Z,
            rot_max: std::f64::consts::TAU,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            seed: 0,
        }
    }
}

impl AugmentParams {
    /// No scaling, rotation or jitter.
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            rot_max: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::InvalidParam(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma <= self.jitter_clip) {
            return Err(Error::InvalidParam(format!(
                "jitter sigma {} and clip {} must satisfy 0 <= sigma <= clip",
                self.jitter_sigma, self.jitter_clip
            )));
        }
        if !(self.rot_max >= 0.0 && self.rot_max.is_finite()) {
            return Err(Error::InvalidParam(format!("rotation range {} must be >= 0", self.rot_max)));
        }
        Ok(())
    }
}

/// Scales about the centroid, rotates about `rot_axis` through the centroid,
/// then adds clipped Gaussian jitter per coordinate. Colors, labels and point
/// order are untouched.
pub fn augment(cloud: &PointCloud, params: &AugmentParams, stream: &mut RngStream) -> PointCloud {
    let scale = stream.uniform(params.scale_min, params.scale_max);
    let theta = stream.uniform(0.0, params.rot_max);
    let (sin, cos) = theta.sin_cos();
    let center = cloud.centroid();
    // Rotation acts on the two coordinates orthogonal to the axis.
    let (a, b) = match params.rot_axis {
        Axis::X => (1, 2),
        Axis::Y => (2, 0),
        Axis::Z => (0, 1),
    };

    let mut positions = cloud.positions.clone();
    let rigid = scale != 1.0 || theta != 0.0;
    for i in 0..positions.rows() {
        let row = positions.row_mut(i);
        if rigid {
            let mut d = [0.0; 3];
            for k in 0..3 {
                d[k] = scale * (row[k] - center[k]);
            }
            let (da, db) = (d[a], d[b]);
            d[a] = cos * da - sin * db;
            d[b] = sin * da + cos * db;
            for k in 0..3 {
                row[k] = center[k] + d[k];
            }
        }
        if params.jitter_sigma > 0.0 {
            for v in row.iter_mut() {
                let noise = (params.jitter_sigma * stream.standard_normal())
                    .clamp(-params.jitter_clip, params.jitter_clip);
                *v += noise;
            }
        }
    }

    PointCloud {
        positions,
        colors: cloud.colors.clone(),
        labels: cloud.labels.clone(),
    }
}

/// Two augmented views of one scene. Point `i` of `view1` and point `i` of
/// `view2` are the same source point.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: PointCloud,
    pub view2: PointCloud,
}

pub fn make_view_pair(cloud: &PointCloud, params: &AugmentParams, seed: u64) -> ViewPair {
    let root = RngStream::new(seed);
    let view1 = augment(cloud, params, &mut root.substream(tags::VIEW1));
    let view2 = augment(cloud, params, &mut root.substream(tags::VIEW2));
    ViewPair { view1, view2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cloud(n: usize, seed: u64, labeled: bool) -> PointCloud {
        let mut s = RngStream::new(seed);
        let pos = Matrix::from_fn(n, 3, |_, _| s.uniform(-5.0, 5.0));
        let col = Matrix::from_fn(n, 3, |_, _| s.uniform(0.0, 1.0));
        let labels = labeled.then(|| (0..n).map(|_| s.below(10) as u32).collect());
        PointCloud::new(pos, col, labels).unwrap()
    }

    fn dist(m: &Matrix, i: usize, j: usize) -> f64 {
        (0..3).map(|k| (m.get(i, k) - m.get(j, k)).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn ascii_single_point() {
        let c = parse_ascii("0 0 0 1 1 1\n").unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.labels().is_none());

        let c = parse_ascii("# header\n1 2 3 0.5 0.5 0.5 7\n").unwrap();
        assert_eq!(c.labels(), Some(&[7u32][..]));
        assert_eq!(c.positions().row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn ascii_errors() {
        match parse_ascii("0 0 0 1 1 1\n0 0 x 1 1 1\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_ascii("0 0 0 1.5 0 0\n"), Err(Error::Range(_))));
        assert!(matches!(
            parse_ascii("0 0 0 1 1 1\n0 0 0 1 1 1 3\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(parse_ascii("0 0 0\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ascii_round_trip() {
        let c = random_cloud(50, 4, true);
        let back = parse_ascii(&to_ascii(&c)).unwrap();
        assert!(back.positions().max_abs_diff(c.positions()) <= 1e-9);
        assert_eq!(back.labels(), c.labels());
    }

    #[test]
    fn binary_sizes() {
        let one = PointCloud::new(Matrix::zeros(1, 3), Matrix::zeros(1, 3), None).unwrap();
        assert_eq!(encode_binary(&one).len(), 41);
        let two =
            PointCloud::new(Matrix::zeros(2, 3), Matrix::zeros(2, 3), Some(vec![0, 1])).unwrap();
        assert_eq!(encode_binary(&two).len(), 73);
    }

    #[test]
    fn binary_round_trip_is_bit_exact_at_f32() {
        let c = random_cloud(100, 5, true);
        let bytes = encode_binary(&c);
        let back = decode_binary(&bytes).unwrap();
        assert_eq!(encode_binary(&back), bytes);
        for (a, b) in back.positions().as_slice().iter().zip(c.positions().as_slice()) {
            assert_eq!(a.to_bits(), (*b as f32 as f64).to_bits());
        }
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_cloud(20, 8, true);
        let bin = dir.path().join("c.epcc");
        save_binary(&c, &bin).unwrap();
        assert_eq!(encode_binary(&load_binary(&bin).unwrap()), encode_binary(&c));
        let txt = dir.path().join("c.txt");
        save_ascii(&c, &txt).unwrap();
        assert_eq!(load_ascii(&txt).unwrap().labels(), c.labels());
        assert!(matches!(load_binary(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn binary_errors() {
        let c = random_cloud(3, 6, false);
        let mut bytes = encode_binary(&c);
        bytes[0] = b'X';
        assert!(matches!(decode_binary(&bytes), Err(Error::Format(_))));
        let bytes = encode_binary(&c);
        match decode_binary(&bytes[..bytes.len() - 5]) {
            Err(Error::Length { expected, actual }) => {
                assert_eq!(expected, 17 + 72);
                assert_eq!(actual, 17 + 72 - 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rigid_augmentation_preserves_distances() {
        let c = random_cloud(20, 7, false);
        let p = AugmentParams {
            scale_min: 1.0,
            scale_max: 1.0,
            jitter_sigma: 0.0,
            ..AugmentParams::default()
        };
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let p = AugmentParams { rot_axis: axis, ..p.clone() };
            let a = augment(&c, &p, &mut RngStream::new(1));
            for i in 0..20 {
                for j in 0..20 {
                    let d0 = dist(c.positions(), i, j);
                    assert!((dist(a.positions(), i, j) - d0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn pure_scale_doubles_centroid_distances() {
        let c = random_cloud(20, 8, false);
        let p = AugmentParams {
            scale_min: 2.0,
            scale_max: 2.0,
            jitter_sigma: 0.0,
            ..AugmentParams::default()
        };
        let a = augment(&c, &p, &mut RngStream::new(2));
        let c0 = c.centroid();
        let c1 = a.centroid();
        for i in 0..20 {
            let n0: f64 = (0..3).map(|k| (c.positions().get(i, k) - c0[k]).powi(2)).sum::<f64>().sqrt();
            let n1: f64 = (0..3).map(|k| (a.positions().get(i, k) - c1[k]).powi(2)).sum::<f64>().sqrt();
            assert!((n1 - 2.0 * n0).abs() <= 1e-9);
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let c = random_cloud(200, 9, false);
        let p = AugmentParams {
            scale_min: 1.0,
            scale_max: 1.0,
            rot_max: 0.0,
            jitter_sigma: 0.05,
            jitter_clip: 0.05,
            ..AugmentParams::default()
        };
        let a = augment(&c, &p, &mut RngStream::new(3));
        assert!(a.positions().max_abs_diff(c.positions()) <= 0.05 + 1e-12);
        assert_eq!(a.colors(), c.colors());
    }

    #[test]
    fn identity_views_equal_source() {
        let c = random_cloud(30, 10, true);
        let pair = make_view_pair(&c, &AugmentParams::identity(), 99);
        assert_eq!(pair.view1, c);
        assert_eq!(pair.view2, c);
    }

    #[test]
    fn view_pairs_are_deterministic_and_distinct() {
        let c = random_cloud(30, 11, true);
        let p = AugmentParams::default();
        let a = make_view_pair(&c, &p, 5);
        let b = make_view_pair(&c, &p, 5);
        assert_eq!(encode_binary(&a.view1), encode_binary(&b.view1));
        assert_eq!(encode_binary(&a.view2), encode_binary(&b.view2));
        assert_ne!(a.view1, a.view2);
        assert_eq!(a.view1.len(), 30);
        assert_eq!(a.view1.labels(), c.labels());
    }

    #[test]
    fn validate_rejects_bad_params() {
        let mut p = AugmentParams::default();
        p.scale_min = 0.0;
        assert!(p.validate().is_err());
        let mut p = AugmentParams::default();
        p.jitter_sigma = 1.0;
        assert!(p.validate().is_err());
        assert!(AugmentParams::default().validate().is_ok());
    }
}
