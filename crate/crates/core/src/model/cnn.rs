use super::{softmax_xent_backward, Batch, ModelSpec};

#[derive(Clone, Copy)]
struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    c1: usize,
    c2: usize,
    h2: usize,
    w2: usize,
    h4: usize,
    w4: usize,
    classes: usize,
}

impl Dims {
    fn new(spec: &ModelSpec, (c1, c2): (usize, usize)) -> Self {
        let (h, w) = (spec.input.rows, spec.input.cols);
        Self {
            cin: spec.input.channels,
            h,
            w,
            c1,
            c2,
            h2: h / 2,
            w2: w / 2,
            h4: h / 4,
            w4: w / 4,
            classes: spec.classes,
        }
    }

    fn flat(&self) -> usize {
        self.c2 * self.h4 * self.w4
    }
}

/// Offsets of the six parameter blocks, in layout order.
struct Offsets {
    k1: usize,
    b1: usize,
    k2: usize,
    b2: usize,
    fw: usize,
    fb: usize,
}

impl Offsets {
    fn new(d: &Dims) -> Self {
        let k1 = 0;
        let b1 = k1 + d.c1 * d.cin * 9;
        let k2 = b1 + d.c1;
        let b2 = k2 + d.c2 * d.c1 * 9;
        let fw = b2 + d.c2;
        let fb = fw + d.classes * d.flat();
        Self {
            k1,
            b1,
            k2,
            b2,
            fw,
            fb,
        }
    }
}

/// 3x3 convolution with zero padding 1, stride 1.
fn conv3x3(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let cout = bias.len();
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o];
                for ci in 0..cin {
                    let kbase = (o * cin + ci) * 9;
                    let ibase = ci * h * w;
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kernel[kbase + ky * 3 + kx]
                                * input[ibase + iy as usize * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
}

/// ReLU followed by 2x2 max pooling. Records the flat source index of each
/// pooled value (first maximum in scan order).
fn relu_pool(pre: &[f64], c: usize, h: usize, w: usize, out: &mut [f64], arg: &mut [usize]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut best_i = (ch * h + 2 * y) * w + 2 * x;
                let mut best = pre[best_i].max(0.0);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                    let v = pre[i].max(0.0);
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                let o = (ch * ho + y) * wo + x;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
}

struct Activations {
    pre1: Vec<f64>,
    pool1: Vec<f64>,
    arg1: Vec<usize>,
    pre2: Vec<f64>,
    pool2: Vec<f64>,
    arg2: Vec<usize>,
}

impl Activations {
    fn new(d: &Dims) -> Self {
        Self {
            pre1: vec![0.0; d.c1 * d.h * d.w],
            pool1: vec![0.0; d.c1 * d.h2 * d.w2],
            arg1: vec![0; d.c1 * d.h2 * d.w2],
            pre2: vec![0.0; d.c2 * d.h2 * d.w2],
            pool2: vec![0.0; d.flat()],
            arg2: vec![0; d.flat()],
        }
    }
}

fn forward(
    d: &Dims,
    o: &Offsets,
    params: &[f64],
    x: &[f64],
    act: &mut Activations,
    logits: &mut [f64],
) {
    conv3x3(
        x,
        d.cin,
        d.h,
        d.w,
        &params[o.k1..o.b1],
        &params[o.b1..o.k2],
        &mut act.pre1,
    );
    relu_pool(&act.pre1, d.c1, d.h, d.w, &mut act.pool1, &mut act.arg1);
    conv3x3(
        &act.pool1,
        d.c1,
        d.h2,
        d.w2,
        &params[o.k2..o.b2],
        &params[o.b2..o.fw],
        &mut act.pre2,
    );
    relu_pool(&act.pre2, d.c2, d.h2, d.w2, &mut act.pool2, &mut act.arg2);
    let n = d.flat();
    for (c, z) in logits.iter_mut().enumerate() {
        let row = &params[o.fw + c * n..o.fw + (c + 1) * n];
        *z = params[o.fb + c] + row.iter().zip(&act.pool2).map(|(w, a)| w * a).sum::<f64>();
    }
}

/// Accumulates kernel/bias gradients of a 3x3 conv and, when `d_input` is
/// given, the gradient with respect to its input.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    d_out: &[f64],
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let cout = d_bias.len();
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let g = d_out[(o * h + y) * w + x];
                if g == 0.0 {
                    continue;
                }
                d_bias[o] += g;
                for ci in 0..cin {
                    let kbase = (o * cin + ci) * 9;
                    let ibase = ci * h * w;
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ii = ibase + iy as usize * w + ix as usize;
                            d_kernel[kbase + ky * 3 + kx] += g * input[ii];
                            if let Some(di) = d_input.as_deref_mut() {
                                di[ii] += g * kernel[kbase + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn logits(
    spec: &ModelSpec,
    channels: (usize, usize),
    params: &[f64],
    x: &[f32],
    out: &mut [f64],
) {
    let d = Dims::new(spec, channels);
    let o = Offsets::new(&d);
    let mut act = Activations::new(&d);
    let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    forward(&d, &o, params, &x, &mut act, out);
}

pub(super) fn forward_backward(
    spec: &ModelSpec,
    channels: (usize, usize),
    params: &[f64],
    batch: &Batch,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let d = Dims::new(spec, channels);
    let o = Offsets::new(&d);
    let n = d.flat();
    let scale = 1.0 / batch.len() as f64;
    let mut act = Activations::new(&d);
    let mut z = vec![0.0; d.classes];
    let mut x = vec![0.0; spec.input.len()];
    let mut d_pre2 = vec![0.0; act.pre2.len()];
    let mut d_pool1 = vec![0.0; act.pool1.len()];
    let mut d_pre1 = vec![0.0; act.pre1.len()];
    let mut loss = 0.0;

    for (i, &label) in batch.labels.iter().enumerate() {
        for (xi, &v) in x.iter_mut().zip(batch.sample(i)) {
            *xi = v as f64;
        }
        forward(&d, &o, params, &x, &mut act, &mut z);
        loss += softmax_xent_backward(&mut z, label, scale) * scale;

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };

        d_pre2.iter_mut().for_each(|v| *v = 0.0);
        for (c, &dz) in z.iter().enumerate() {
            g[o.fb + c] += dz;
            let row = o.fw + c * n;
            for k in 0..n {
                g[row + k] += dz * act.pool2[k];
                let src = act.arg2[k];
                if act.pre2[src] > 0.0 {
                    d_pre2[src] += dz * params[row + k];
                }
            }
        }

        d_pool1.iter_mut().for_each(|v| *v = 0.0);
        {
            let (head, tail) = g.split_at_mut(o.b2);
            conv3x3_backward(
                &act.pool1,
                d.c1,
                d.h2,
                d.w2,
                &params[o.k2..o.b2],
                &d_pre2,
                &mut head[o.k2..o.b2],
                &mut tail[..d.c2],
                Some(&mut d_pool1),
            );
        }

        d_pre1.iter_mut().for_each(|v| *v = 0.0);
        for (k, &gp) in d_pool1.iter().enumerate() {
            let src = act.arg1[k];
            if act.pre1[src] > 0.0 {
                d_pre1[src] += gp;
            }
        }
        let (head, tail) = g.split_at_mut(o.b1);
        conv3x3_backward(
            &x,
            d.cin,
            d.h,
            d.w,
            &params[o.k1..o.b1],
            &d_pre1,
            &mut head[o.k1..o.b1],
            &mut tail[..d.c1],
            None,
        );
    }
    loss
}
