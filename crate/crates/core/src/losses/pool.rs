use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::superpoint::SegmentAssignment;

/// Average of the member rows of each segment, one output row per segment.
pub fn segment_pool(f: &Matrix, seg: &SegmentAssignment) -> Result<Matrix> {
    if seg.num_points() != f.rows() {
        return Err(Error::Shape {
            op: "segment_pool",
            left: f.shape(),
            right: (seg.num_points(), seg.num_segments()),
        });
    }
    let sizes = seg.sizes();
    let mut out = Matrix::zeros(seg.num_segments(), f.cols());
    for (i, &s) in seg.segment_of().iter().enumerate() {
        for (o, v) in out.row_mut(s).iter_mut().zip(f.row(i)) {
            *o += v;
        }
    }
    for (s, &size) in sizes.iter().enumerate() {
        if size == 0 {
            return Err(Error::PartitionViolation(s));
        }
        let count = size as f64;
        out.row_mut(s).iter_mut().for_each(|v| *v /= count);
    }
    Ok(out)
}

/// Spreads each segment's gradient evenly over its members.
pub fn segment_pool_backward(grad_pooled: &Matrix, seg: &SegmentAssignment) -> Result<Matrix> {
    if grad_pooled.rows() != seg.num_segments() {
        return Err(Error::Shape {
            op: "segment_pool_backward",
            left: grad_pooled.shape(),
            right: (seg.num_points(), seg.num_segments()),
        });
    }
    let sizes = seg.sizes();
    let mut out = Matrix::zeros(seg.num_points(), grad_pooled.cols());
    for (i, &s) in seg.segment_of().iter().enumerate() {
        let count = sizes[s] as f64;
        for (o, g) in out.row_mut(i).iter_mut().zip(grad_pooled.row(s)) {
            *o = g / count;
        }
    }
    Ok(out)
}
