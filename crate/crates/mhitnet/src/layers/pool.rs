//! Spatial pooling.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Value};

/// Per-channel spatial mean down to 1x1. The gradient spreads uniformly as
/// g / (H*W).
pub fn adaptive_avg_pool_1x1(tape: &mut Tape, x: Value) -> Value {
    let s = tape.shape(x);
    let hw = s.hw();
    let data = tape.data(x);
    let mut out = vec![0.0f32; s.batch * s.channels];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for &v in &data[i * hw..(i + 1) * hw] {
            acc += v as f64;
        }
        *o = (acc / hw as f64) as f32;
    }
    let back: crate::tensor::tape_backward_fn!() = Box::new(move |g: &[f32], store: &mut crate::tensor::GradStore| {
        store.add_to(x, |dx| {
            for (i, &gv) in g.iter().enumerate() {
                let spread = gv / hw as f32;
                for o in &mut dx[i * hw..(i + 1) * hw] {
                    *o += spread;
                }
            }
        });
    });
    tape.push(Shape::new(s.batch, s.channels, 1, 1), out, &[x], Some(back))
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// (row-major) maximum of each window.
pub fn max_pool2x2(tape: &mut Tape, x: Value) -> Result<Value> {
    let s = tape.shape(x);
    if s.height % 2 != 0 || s.width % 2 != 0 {
        return Err(Error::Geometry(format!(
            "max_pool2x2 needs even spatial dims, got {}x{}",
            s.height, s.width
        )));
    }
    let (oh, ow) = (s.height / 2, s.width / 2);
    let out_shape = Shape::new(s.batch, s.channels, oh, ow);
    let data = tape.data(x);
    let mut out = vec![0.0f32; out_shape.numel()];
    let mut argmax = vec![0u32; out_shape.numel()];
    let planes = s.batch * s.channels;
    for p in 0..planes {
        let plane = &data[p * s.hw()..(p + 1) * s.hw()];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (oy * 2 + dy) * s.width + ox * 2 + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = (p * s.hw() + best_idx) as u32;
            }
        }
    }
    let back: crate::tensor::tape_backward_fn!() = Box::new(move |g: &[f32], store: &mut crate::tensor::GradStore| {
        store.add_to(x, |dx| {
            for (o, &gv) in g.iter().enumerate() {
                dx[argmax[o] as usize] += gv;
            }
        });
    });
    Ok(tape.push(out_shape, out, &[x], Some(back)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn avg_pool_constant_and_reference_values() {
        let mut tape = Tape::new();
        let c = Tensor::full(Shape::new(1, 2, 3, 3), 0.75);
        let v = tape.constant(&c);
        let y = adaptive_avg_pool_1x1(&mut tape, v);
        assert_eq!(tape.shape(y), Shape::new(1, 2, 1, 1));
        assert!(tape.data(y).iter().all(|&x| (x - 0.75).abs() < 1e-7));

        let q = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let vq = tape.constant(&q);
        let yq = adaptive_avg_pool_1x1(&mut tape, vq);
        assert!((tape.data(yq)[0] - 2.5).abs() < 1e-7);

        // 3x3 ramp 0..8 means 4.0 (summation oracle: 36 / 9)
        let ramp = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| (y * 3 + x) as f32);
        let ramp_sum: f32 = ramp.data().iter().sum();
        let vr = tape.constant(&ramp);
        let yr = adaptive_avg_pool_1x1(&mut tape, vr);
        assert!((tape.data(yr)[0] - ramp_sum / 9.0).abs() < 1e-7);
        assert!((tape.data(yr)[0] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn avg_pool_backward_spreads_uniformly() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 2), |_, _, y, xx| (y + xx) as f32);
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let y = adaptive_avg_pool_1x1(&mut tape, v);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[0.25; 4][..]);
    }

    #[test]
    fn max_pool_basics_and_tie_break() {
        let mut tape = Tape::new();
        let c = Tensor::full(Shape::new(1, 1, 4, 4), 2.0);
        let v = tape.constant(&c);
        let y = max_pool2x2(&mut tape, v).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 2, 2));
        assert!(tape.data(y).iter().all(|&x| x == 2.0));

        let w = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let vw = tape.constant(&w);
        let yw = max_pool2x2(&mut tape, vw).unwrap();
        assert_eq!(tape.data(yw), &[4.0]);

        // tie window [5,5;1,1]: value 5, gradient routed to (0,0)
        let t = Tensor::new(Shape::new(1, 1, 2, 2), vec![5.0, 5.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let vt = tape.leaf(&t, true);
        let yt = max_pool2x2(&mut tape, vt).unwrap();
        assert_eq!(tape.data(yt), &[5.0]);
        let loss = tape.sum(yt);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(vt).unwrap(), &[1.0, 0.0, 0.0, 0.0][..]);
    }

    #[test]
    fn max_pool_rejects_odd_dims() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(Shape::new(1, 1, 3, 4));
        let v = tape.constant(&x);
        assert!(matches!(max_pool2x2(&mut tape, v), Err(Error::Geometry(_))));
    }
}
