//! Single-sample kernels. Accumulation order is fixed: output unit first,
//! then spatial position, then (input channel, kernel row, kernel column).

use super::{BatchNorm, Conv2d, Linear, Pool, Tensor};

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<(), String> {
    if shape.len() != rank {
        return Err(format!("{what} expects a rank-{rank} input, got {shape:?}"));
    }
    Ok(())
}

fn window_out(size: usize, pad: usize, kernel: usize, stride: usize) -> Result<usize, String> {
    if stride == 0 {
        return Err("stride must be at least 1".into());
    }
    let span = size + 2 * pad;
    if kernel == 0 || kernel > span {
        return Err(format!("kernel {kernel} does not fit padded extent {span}"));
    }
    Ok((span - kernel) / stride + 1)
}

pub fn conv2d_output_shape(input: &[usize], conv: &Conv2d) -> Result<Vec<usize>, String> {
    expect_rank(input, 3, "conv2d")?;
    let w = conv.weight.shape();
    if w.len() != 4 {
        return Err(format!("conv2d weight must be rank 4, got {w:?}"));
    }
    if w[1] != input[0] {
        return Err(format!("conv2d expects {} input channels, got {}", w[1], input[0]));
    }
    if conv.bias.len() != w[0] {
        return Err(format!("conv2d bias has {} entries for {} filters", conv.bias.len(), w[0]));
    }
    let oh = window_out(input[1], conv.padding, w[2], conv.stride)?;
    let ow = window_out(input[2], conv.padding, w[3], conv.stride)?;
    Ok(vec![w[0], oh, ow])
}

/// Cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, conv: &Conv2d) -> Result<Tensor, String> {
    let out_shape = conv2d_output_shape(input.shape(), conv)?;
    let [c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let ws = conv.weight.shape();
    let (kh, kw) = (ws[2], ws[3]);
    let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let x = input.data();
    let wt = conv.weight.data();
    let pad = conv.padding as isize;
    let stride = conv.stride as isize;

    let mut out = vec![0.0f32; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = conv.bias[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = oy as isize * stride + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ox as isize * stride + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wv = wt[((co * c_in + ci) * kh + ky) * kw + kx];
                            let xv = x[(ci * h + iy as usize) * w + ix as usize];
                            acc += wv * xv;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn linear_output_shape(input: &[usize], lin: &Linear) -> Result<Vec<usize>, String> {
    expect_rank(input, 1, "linear")?;
    let w = lin.weight.shape();
    if w.len() != 2 {
        return Err(format!("linear weight must be rank 2, got {w:?}"));
    }
    if w[1] != input[0] {
        return Err(format!("linear expects {} inputs, got {}", w[1], input[0]));
    }
    if lin.bias.len() != w[0] {
        return Err(format!("linear bias has {} entries for {} outputs", lin.bias.len(), w[0]));
    }
    Ok(vec![w[0]])
}

pub fn linear(input: &Tensor, lin: &Linear) -> Result<Tensor, String> {
    let out_shape = linear_output_shape(input.shape(), lin)?;
    let (n_out, n_in) = (out_shape[0], input.shape()[0]);
    let x = input.data();
    let w = lin.weight.data();
    let out = (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            row.iter().zip(x).fold(lin.bias[o], |acc, (wv, xv)| acc + wv * xv)
        })
        .collect();
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
    )
}

pub fn flatten(input: &Tensor) -> Tensor {
    Tensor::from_parts(vec![input.numel()], input.data().to_vec())
}

pub fn pool_output_shape(input: &[usize], pool: &Pool) -> Result<Vec<usize>, String> {
    expect_rank(input, 3, "pool")?;
    let oh = window_out(input[1], 0, pool.window, pool.stride)?;
    let ow = window_out(input[2], 0, pool.window, pool.stride)?;
    Ok(vec![input[0], oh, ow])
}

fn pool_with(input: &Tensor, pool: &Pool, reduce: impl Fn(&mut dyn Iterator<Item = f32>) -> f32) -> Result<Tensor, String> {
    let out_shape = pool_output_shape(input.shape(), pool)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut it = (0..pool.window).flat_map(|ky| {
                    let iy = oy * pool.stride + ky;
                    (0..pool.window).map(move |kx| x[(ch * h + iy) * w + ox * pool.stride + kx])
                });
                out.push(reduce(&mut it));
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn max_pool(input: &Tensor, pool: &Pool) -> Result<Tensor, String> {
    pool_with(input, pool, &|it: &mut dyn Iterator<Item = f32>| it.fold(f32::NEG_INFINITY, f32::max))
}

pub fn avg_pool(input: &Tensor, pool: &Pool) -> Result<Tensor, String> {
    let area = (pool.window * pool.window) as f32;
    pool_with(input, pool, &|it: &mut dyn Iterator<Item = f32>| it.fold(0.0, |a, v| a + v) / area)
}

pub fn batch_norm_check(input: &[usize], bn: &BatchNorm) -> Result<(), String> {
    let c = *input.first().ok_or("batchnorm needs a non-empty shape")?;
    for (name, v) in [("mean", &bn.mean), ("var", &bn.var), ("gamma", &bn.gamma), ("beta", &bn.beta)] {
        if v.len() != c {
            return Err(format!("batchnorm {name} has {} entries for {c} channels", v.len()));
        }
    }
    if !(bn.eps > 0.0) {
        return Err("batchnorm epsilon must be positive".into());
    }
    if bn.var.iter().any(|&v| v < 0.0) {
        return Err("batchnorm variance must be non-negative".into());
    }
    Ok(())
}

/// Per-channel affine normalization over the leading axis.
pub fn batch_norm(input: &Tensor, bn: &BatchNorm) -> Result<Tensor, String> {
    batch_norm_check(input.shape(), bn)?;
    let c = input.shape()[0];
    let per = input.numel() / c;
    let mut out = input.data().to_vec();
    for ch in 0..c {
        let scale = bn.gamma[ch] / (bn.var[ch] + bn.eps).sqrt();
        for v in &mut out[ch * per..(ch + 1) * per] {
            *v = (*v - bn.mean[ch]) * scale + bn.beta[ch];
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_sum_kernel() {
        let conv = Conv2d {
            weight: t(&[1, 1, 2, 2], &[1.0; 4]),
            bias: vec![0.0],
            stride: 1,
            padding: 0,
        };
        let out = conv2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), &conv).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let conv = Conv2d {
            weight: t(&[1, 1, 1, 1], &[1.0]),
            bias: vec![0.0],
            stride: 1,
            padding: 0,
        };
        let x = t(&[1, 3, 2], &[1.0, -2.0, 3.5, 4.0, 0.0, 6.0]);
        assert_eq!(conv2d(&x, &conv).unwrap(), x);
    }

    #[test]
    fn conv_padding_and_stride_shapes() {
        let conv = Conv2d {
            weight: Tensor::zeros(vec![2, 1, 3, 3]),
            bias: vec![0.0; 2],
            stride: 2,
            padding: 1,
        };
        let out = conv2d(&Tensor::zeros(vec![1, 5, 5]), &conv).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let bad = Conv2d { stride: 0, ..conv };
        assert!(conv2d(&Tensor::zeros(vec![1, 5, 5]), &bad).is_err());
    }

    #[test]
    fn linear_identity_and_relu() {
        let lin = Linear {
            weight: t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            bias: vec![0.0; 3],
        };
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(linear(&x, &lin).unwrap(), x);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert!(linear(&t(&[2], &[1.0, 1.0]), &lin).is_err());
    }

    #[test]
    fn pools_and_batchnorm() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = Pool { window: 2, stride: 2 };
        assert_eq!(max_pool(&x, &p).unwrap().data(), &[4.0]);
        assert_eq!(avg_pool(&x, &p).unwrap().data(), &[2.5]);
        let bn = BatchNorm {
            mean: vec![1.0],
            var: vec![4.0],
            gamma: vec![2.0],
            beta: vec![0.5],
            eps: 1e-12,
        };
        let y = batch_norm(&x, &bn).unwrap();
        assert_eq!(y.data(), &[0.5, 1.5, 2.5, 3.5]);
        assert_eq!(flatten(&x).shape(), &[4]);
        assert_eq!(sigmoid(&t(&[1], &[0.0])).data(), &[0.5]);
    }
}
