//! Per-layer numeric kernels and their exact adjoints.
//!
//! Affine layers apply a weight matrix across the channel dimension at every
//! spatial position (a 1x1-convolution stand-in, weight-only). Downsampling
//! is 2x average pooling, upsampling nearest-neighbour duplication; both have
//! trivial exact adjoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::ExecError;
use crate::graph::{LayerKind, LayerSpec, ModelGraph};

/// Weight tensors by affine layer id, each of shape `[c_out, c_in]`.
pub type Params = BTreeMap<usize, Tensor>;

/// Weight initialisation family. `Positive` keeps every weight strictly
/// positive so relu layers stay in their linear region for positive inputs
/// (used by finite-difference tests that must avoid kinks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamInit {
    Symmetric,
    Positive,
}

/// Per-item output shape of every layer, `[channels, spatial...]`.
pub fn infer_shapes(graph: &ModelGraph, input_item_shape: &[usize]) -> Result<Vec<Vec<usize>>, ExecError> {
    let n = graph.layers.len();
    let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); n];
    for layer in &graph.layers {
        let id = layer.id;
        let input_shape = |inputs: &[usize]| -> Vec<Vec<usize>> {
            inputs.iter().map(|&u| shapes[u].clone()).collect()
        };
        shapes[id] = match layer.kind {
            LayerKind::Source => input_item_shape.to_vec(),
            LayerKind::Sink | LayerKind::Relu | LayerKind::Passthrough | LayerKind::Slice => {
                let ins = input_shape(&layer.inputs);
                ins.into_iter().next().ok_or_else(|| ExecError::ShapeMismatch {
                    layer: id,
                    detail: "missing input".into(),
                })?
            }
            LayerKind::Affine => {
                let ins = input_shape(&layer.inputs);
                let inp = ins.first().ok_or_else(|| ExecError::ShapeMismatch {
                    layer: id,
                    detail: "missing input".into(),
                })?;
                let spatial: usize = inp[1..].iter().product();
                if spatial == 0 || layer.activation_elems % spatial as u64 != 0 {
                    return Err(ExecError::ShapeMismatch {
                        layer: id,
                        detail: format!(
                            "activation_elems {} not divisible by spatial extent {spatial}",
                            layer.activation_elems
                        ),
                    });
                }
                let c_out = (layer.activation_elems / spatial as u64) as usize;
                if c_out == 0 {
                    return Err(ExecError::ShapeMismatch {
                        layer: id,
                        detail: "affine output has zero channels".into(),
                    });
                }
                let mut s = inp.clone();
                s[0] = c_out;
                s
            }
            LayerKind::Downsample2x => {
                let ins = input_shape(&layer.inputs);
                let inp = &ins[0];
                if inp.len() < 2 {
                    return Err(ExecError::ShapeMismatch {
                        layer: id,
                        detail: "downsample needs a spatial dimension".into(),
                    });
                }
                let mut s = inp.clone();
                for d in s[1..].iter_mut() {
                    if *d % 2 != 0 {
                        return Err(ExecError::ShapeMismatch {
                            layer: id,
                            detail: format!("odd spatial extent {d}"),
                        });
                    }
                    *d /= 2;
                }
                s
            }
            LayerKind::Upsample2x => {
                let ins = input_shape(&layer.inputs);
                let inp = &ins[0];
                if inp.len() < 2 {
                    return Err(ExecError::ShapeMismatch {
                        layer: id,
                        detail: "upsample needs a spatial dimension".into(),
                    });
                }
                let mut s = inp.clone();
                for d in s[1..].iter_mut() {
                    *d *= 2;
                }
                s
            }
            LayerKind::Concat => {
                let ins = input_shape(&layer.inputs);
                let spatial = ins[0][1..].to_vec();
                for other in &ins[1..] {
                    if other[1..] != spatial[..] {
                        return Err(ExecError::ShapeMismatch {
                            layer: id,
                            detail: "concat inputs disagree on spatial shape".into(),
                        });
                    }
                }
                let channels = ins.iter().map(|s| s[0]).sum();
                let mut s = vec![channels];
                s.extend_from_slice(&spatial);
                s
            }
        };
    }
    Ok(shapes)
}

/// Draws weights for every affine layer, deterministically from the rng.
pub fn init_params(
    graph: &ModelGraph,
    input_item_shape: &[usize],
    rng: &mut ChaCha8Rng,
    init: ParamInit,
) -> Result<Params, ExecError> {
    let shapes = infer_shapes(graph, input_item_shape)?;
    let mut params = Params::new();
    for layer in &graph.layers {
        if layer.kind != LayerKind::Affine {
            continue;
        }
        let c_in = shapes[layer.inputs[0]][0];
        let c_out = shapes[layer.id][0];
        let scale = 1.0 / (c_in as f64).sqrt();
        let data: Vec<f64> = (0..c_out * c_in)
            .map(|_| match init {
                ParamInit::Symmetric => rng.random_range(-1.0..1.0) * scale,
                ParamInit::Positive => rng.random_range(0.2..1.0) * scale,
            })
            .collect();
        params.insert(layer.id, Tensor::from_vec(vec![c_out, c_in], data));
    }
    Ok(params)
}

fn spatial_of(t: &Tensor) -> usize {
    t.shape[2..].iter().product()
}

/// Forward evaluation of one layer. `inputs` follow the layer's declared
/// input order.
pub fn layer_forward(
    layer: &LayerSpec,
    inputs: &[&Tensor],
    params: &Params,
) -> Result<Tensor, ExecError> {
    let id = layer.id;
    match layer.kind {
        LayerKind::Source => Err(ExecError::ShapeMismatch {
            layer: id,
            detail: "source is fed externally".into(),
        }),
        LayerKind::Sink | LayerKind::Passthrough | LayerKind::Slice => Ok(inputs[0].clone()),
        LayerKind::Relu => {
            let x = inputs[0];
            Ok(Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            })
        }
        LayerKind::Affine => {
            let x = inputs[0];
            let w = params.get(&id).ok_or(ExecError::MissingParams { layer: id })?;
            let (c_out, c_in) = (w.shape[0], w.shape[1]);
            if x.shape[1] != c_in {
                return Err(ExecError::ShapeMismatch {
                    layer: id,
                    detail: format!("expected {c_in} channels, got {}", x.shape[1]),
                });
            }
            let batch = x.batch();
            let sp = spatial_of(x);
            let mut shape = x.shape.clone();
            shape[1] = c_out;
            let mut out = vec![0.0; batch * c_out * sp];
            for b in 0..batch {
                for co in 0..c_out {
                    for ci in 0..c_in {
                        let wv = w.data[co * c_in + ci];
                        if wv == 0.0 {
                            continue;
                        }
                        let src = (b * c_in + ci) * sp;
                        let dst = (b * c_out + co) * sp;
                        for v in 0..sp {
                            out[dst + v] += wv * x.data[src + v];
                        }
                    }
                }
            }
            Ok(Tensor { shape, data: out })
        }
        LayerKind::Downsample2x => {
            let x = inputs[0];
            let dims = &x.shape[2..];
            if dims.is_empty() || dims.iter().any(|d| d % 2 != 0) {
                return Err(ExecError::ShapeMismatch {
                    layer: id,
                    detail: format!("cannot halve spatial shape {dims:?}"),
                });
            }
            let out_dims: Vec<usize> = dims.iter().map(|d| d / 2).collect();
            let mut shape = x.shape[..2].to_vec();
            shape.extend_from_slice(&out_dims);
            let mut out = Tensor::zeros(shape);
            let inv = 1.0 / (1 << dims.len()) as f64;
            pool_blocks(x, &mut out, dims, &out_dims, |acc, v| *acc += v);
            for v in out.data.iter_mut() {
                *v *= inv;
            }
            Ok(out)
        }
        LayerKind::Upsample2x => {
            let x = inputs[0];
            let dims = &x.shape[2..];
            if dims.is_empty() {
                return Err(ExecError::ShapeMismatch {
                    layer: id,
                    detail: "upsample needs a spatial dimension".into(),
                });
            }
            let out_dims: Vec<usize> = dims.iter().map(|d| d * 2).collect();
            let mut shape = x.shape[..2].to_vec();
            shape.extend_from_slice(&out_dims);
            let mut out = Tensor::zeros(shape);
            // Each coarse voxel value is written to all 2^d fine positions.
            unpool_blocks(x, &mut out, dims, &out_dims, |fine, coarse| *fine = coarse);
            Ok(out)
        }
        LayerKind::Concat => {
            let batch = inputs[0].batch();
            let sp = spatial_of(inputs[0]);
            for t in inputs {
                if t.batch() != batch || spatial_of(t) != sp || t.shape[2..] != inputs[0].shape[2..] {
                    return Err(ExecError::ShapeMismatch {
                        layer: id,
                        detail: "concat inputs disagree".into(),
                    });
                }
            }
            let channels: usize = inputs.iter().map(|t| t.shape[1]).sum();
            let mut shape = inputs[0].shape.clone();
            shape[1] = channels;
            let mut data = Vec::with_capacity(batch * channels * sp);
            for b in 0..batch {
                for t in inputs {
                    let c = t.shape[1];
                    data.extend_from_slice(&t.data[b * c * sp..(b + 1) * c * sp]);
                }
            }
            Ok(Tensor { shape, data })
        }
    }
}

/// Input gradients (one per declared input, same order) and the parameter
/// gradient for affine layers.
pub fn layer_backward(
    layer: &LayerSpec,
    inputs: &[&Tensor],
    grad_out: &Tensor,
    params: &Params,
) -> Result<(Vec<Tensor>, Option<Tensor>), ExecError> {
    let id = layer.id;
    match layer.kind {
        LayerKind::Source => Ok((vec![], None)),
        LayerKind::Sink | LayerKind::Passthrough | LayerKind::Slice => {
            Ok((vec![grad_out.clone()], None))
        }
        LayerKind::Relu => {
            let x = inputs[0];
            let data = x
                .data
                .iter()
                .zip(&grad_out.data)
                .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                .collect();
            Ok((vec![Tensor { shape: x.shape.clone(), data }], None))
        }
        LayerKind::Affine => {
            let x = inputs[0];
            let w = params.get(&id).ok_or(ExecError::MissingParams { layer: id })?;
            let (c_out, c_in) = (w.shape[0], w.shape[1]);
            let batch = x.batch();
            let sp = spatial_of(x);
            let mut dx = Tensor::zeros(x.shape.clone());
            let mut dw = Tensor::zeros(vec![c_out, c_in]);
            for b in 0..batch {
                for co in 0..c_out {
                    let gofs = (b * c_out + co) * sp;
                    for ci in 0..c_in {
                        let xofs = (b * c_in + ci) * sp;
                        let wv = w.data[co * c_in + ci];
                        let mut acc = 0.0;
                        for v in 0..sp {
                            let g = grad_out.data[gofs + v];
                            acc += g * x.data[xofs + v];
                            dx.data[xofs + v] += wv * g;
                        }
                        dw.data[co * c_in + ci] += acc;
                    }
                }
            }
            Ok((vec![dx], Some(dw)))
        }
        LayerKind::Downsample2x => {
            let x = inputs[0];
            let dims = &x.shape[2..];
            let out_dims: Vec<usize> = dims.iter().map(|d| d / 2).collect();
            let mut dx = Tensor::zeros(x.shape.clone());
            let inv = 1.0 / (1 << dims.len()) as f64;
            // Adjoint of mean pooling: spread the gradient evenly.
            unpool_blocks(grad_out, &mut dx, &out_dims, dims, |fine, coarse| *fine = coarse * inv);
            Ok((vec![dx], None))
        }
        LayerKind::Upsample2x => {
            let x = inputs[0];
            let dims = &x.shape[2..];
            let out_dims: Vec<usize> = dims.iter().map(|d| d * 2).collect();
            let mut dx = Tensor::zeros(x.shape.clone());
            // Adjoint of duplication: sum over the copies.
            pool_blocks(grad_out, &mut dx, &out_dims, dims, |acc, v| *acc += v);
            Ok((vec![dx], None))
        }
        LayerKind::Concat => {
            let batch = grad_out.batch();
            let sp = spatial_of(grad_out);
            let mut grads: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
            for b in 0..batch {
                let mut offset = 0usize;
                for (t, g) in inputs.iter().zip(grads.iter_mut()) {
                    let c = t.shape[1];
                    let src = (b * grad_out.shape[1] + offset) * sp;
                    let dst = b * c * sp;
                    g.data[dst..dst + c * sp].copy_from_slice(&grad_out.data[src..src + c * sp]);
                    offset += c;
                }
            }
            Ok((grads, None))
        }
    }
}

/// Walks every (coarse block, fine position) pair: `fine` has extents
/// `fine_dims`, `coarse` extents `coarse_dims = fine_dims / 2`. `combine`
/// folds fine values into the coarse accumulator.
fn pool_blocks(
    fine: &Tensor,
    coarse: &mut Tensor,
    fine_dims: &[usize],
    coarse_dims: &[usize],
    combine: impl Fn(&mut f64, f64),
) {
    let channels = fine.shape[0] * fine.shape[1]; // batch * channels fused
    let fine_sp: usize = fine_dims.iter().product();
    let coarse_sp: usize = coarse_dims.iter().product();
    let d = fine_dims.len();
    let mut idx = vec![0usize; d];
    for c in 0..channels {
        for f_lin in 0..fine_sp {
            // decompose f_lin into coordinates
            let mut rem = f_lin;
            for (i, &dim) in fine_dims.iter().enumerate().rev() {
                idx[i] = rem % dim;
                rem /= dim;
            }
            let mut c_lin = 0usize;
            for (i, &dim) in coarse_dims.iter().enumerate() {
                c_lin = c_lin * dim + idx[i] / 2;
            }
            combine(&mut coarse.data[c * coarse_sp + c_lin], fine.data[c * fine_sp + f_lin]);
        }
    }
}

/// Inverse traversal: writes each coarse value to its 2^d fine positions.
fn unpool_blocks(
    coarse: &Tensor,
    fine: &mut Tensor,
    coarse_dims: &[usize],
    fine_dims: &[usize],
    write: impl Fn(&mut f64, f64),
) {
    let channels = coarse.shape[0] * coarse.shape[1];
    let fine_sp: usize = fine_dims.iter().product();
    let coarse_sp: usize = coarse_dims.iter().product();
    let d = fine_dims.len();
    let mut idx = vec![0usize; d];
    for c in 0..channels {
        for f_lin in 0..fine_sp {
            let mut rem = f_lin;
            for (i, &dim) in fine_dims.iter().enumerate().rev() {
                idx[i] = rem % dim;
                rem /= dim;
            }
            let mut c_lin = 0usize;
            for (i, &dim) in coarse_dims.iter().enumerate() {
                c_lin = c_lin * dim + idx[i] / 2;
            }
            write(&mut fine.data[c * fine_sp + f_lin], coarse.data[c * coarse_sp + c_lin]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(kind: LayerKind, inputs: Vec<usize>, acts: u64) -> LayerSpec {
        LayerSpec {
            id: 1,
            name: "t".into(),
            kind,
            compute_cost: 0.0,
            param_count: 0,
            activation_elems: acts,
            inputs,
        }
    }

    #[test]
    fn identity_affine_preserves_input() {
        let l = layer(LayerKind::Affine, vec![0], 2);
        let mut params = Params::new();
        params.insert(1, Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = Tensor::from_vec(vec![1, 2], vec![3.0, -4.0]);
        let y = layer_forward(&l, &[&x], &params).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn concat_orders_inputs() {
        let l = layer(LayerKind::Concat, vec![0, 1], 4);
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]);
        let y = layer_forward(&l, &[&a, &b], &Params::new()).unwrap();
        assert_eq!(y.shape, vec![1, 4]);
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn down_then_up_shapes() {
        let l = layer(LayerKind::Downsample2x, vec![0], 0);
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = layer_forward(&l, &[&x], &Params::new()).unwrap();
        assert_eq!(y.shape, vec![1, 1, 1, 1]);
        assert_eq!(y.data, vec![2.5]);

        let u = layer(LayerKind::Upsample2x, vec![0], 0);
        let z = layer_forward(&u, &[&y], &Params::new()).unwrap();
        assert_eq!(z.shape, vec![1, 1, 2, 2]);
        assert_eq!(z.data, vec![2.5; 4]);
    }

    #[test]
    fn pooling_adjoints_are_exact() {
        // <Ax, y> == <x, A^T y> for downsample and upsample.
        let x = Tensor::from_vec(vec![1, 1, 4], (1..=4).map(|v| v as f64).collect());
        let down = layer(LayerKind::Downsample2x, vec![0], 0);
        let y = layer_forward(&down, &[&x], &Params::new()).unwrap();
        let g = Tensor::from_vec(vec![1, 1, 2], vec![0.5, -2.0]);
        let (grads, _) = layer_backward(&down, &[&x], &g, &Params::new()).unwrap();
        let dx = &grads[0];
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
