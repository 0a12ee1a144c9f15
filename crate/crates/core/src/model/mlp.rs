use super::{softmax_xent_backward, Batch, ModelSpec};

// Parameter order: fc1.weight [h, n], fc1.bias [h], fc2.weight [c, h], fc2.bias [c].
struct Offsets {
    n_in: usize,
    hidden: usize,
    classes: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Offsets {
    fn new(spec: &ModelSpec, hidden: usize) -> Self {
        let n_in = spec.input.len();
        let classes = spec.classes;
        let w1 = 0;
        let b1 = w1 + hidden * n_in;
        let w2 = b1 + hidden;
        let b2 = w2 + classes * hidden;
        Self {
            n_in,
            hidden,
            classes,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

fn hidden_pre(o: &Offsets, params: &[f64], x: &[f32], pre: &mut [f64]) {
    let w1 = &params[o.w1..o.b1];
    let b1 = &params[o.b1..o.w2];
    for (j, p) in pre.iter_mut().enumerate() {
        let row = &w1[j * o.n_in..(j + 1) * o.n_in];
        let mut acc = b1[j];
        for (w, &xi) in row.iter().zip(x) {
            acc += w * xi as f64;
        }
        *p = acc;
    }
}

fn output(o: &Offsets, params: &[f64], act: &[f64], out: &mut [f64]) {
    let w2 = &params[o.w2..o.b2];
    let b2 = &params[o.b2..o.b2 + o.classes];
    for (c, z) in out.iter_mut().enumerate() {
        let row = &w2[c * o.hidden..(c + 1) * o.hidden];
        *z = b2[c] + row.iter().zip(act).map(|(w, a)| w * a).sum::<f64>();
    }
}

pub(super) fn logits(spec: &ModelSpec, hidden: usize, params: &[f64], x: &[f32], out: &mut [f64]) {
    let o = Offsets::new(spec, hidden);
    let mut act = vec![0.0; hidden];
    hidden_pre(&o, params, x, &mut act);
    act.iter_mut().for_each(|a| *a = a.max(0.0));
    output(&o, params, &act, out);
}

pub(super) fn forward_backward(
    spec: &ModelSpec,
    hidden: usize,
    params: &[f64],
    batch: &Batch,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let o = Offsets::new(spec, hidden);
    let scale = 1.0 / batch.len() as f64;
    let mut pre = vec![0.0; hidden];
    let mut act = vec![0.0; hidden];
    let mut z = vec![0.0; o.classes];
    let mut dh = vec![0.0; hidden];
    let mut loss = 0.0;

    for (i, &label) in batch.labels.iter().enumerate() {
        let x = batch.sample(i);
        hidden_pre(&o, params, x, &mut pre);
        for (a, &p) in act.iter_mut().zip(&pre) {
            *a = p.max(0.0);
        }
        output(&o, params, &act, &mut z);
        loss += softmax_xent_backward(&mut z, label, scale) * scale;

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        // z now holds dL/dz for this sample.
        dh.iter_mut().for_each(|v| *v = 0.0);
        for (c, &dz) in z.iter().enumerate() {
            g[o.b2 + c] += dz;
            let row = o.w2 + c * hidden;
            for j in 0..hidden {
                g[row + j] += dz * act[j];
                dh[j] += dz * params[row + j];
            }
        }
        for j in 0..hidden {
            if pre[j] <= 0.0 {
                continue;
            }
            let d = dh[j];
            g[o.b1 + j] += d;
            let row = &mut g[o.w1 + j * o.n_in..o.w1 + (j + 1) * o.n_in];
            for (gw, &xi) in row.iter_mut().zip(x) {
                if xi != 0.0 {
                    *gw += d * xi as f64;
                }
            }
        }
    }
    loss
}
