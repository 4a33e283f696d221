use super::{Bag, MilParams, ProjActivation};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cross_entropy_from_logits, sigmoid, softmax, Matrix};

/// Forward outputs plus the intermediates the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub logits: Vec<f64>,
    /// `n x k`; column `c` holds the normalized weights for class `c`.
    pub attention: Matrix,
    /// `k x proj_dim`
    pub bag_reps: Matrix,
    /// raw attention scores, `n x k`
    pub scores: Matrix,
    proj_pre: Matrix,
    proj: Matrix,
    tanh_branch: Matrix,
    gate_branch: Matrix,
    gated: Matrix,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f64>,
    pub attention: Matrix,
}

fn check_bag(params: &MilParams, bag: &Bag) -> Result<()> {
    if bag.embeddings.rows() == 0 {
        return Err(Error::Contract(format!("bag {} is empty", bag.slide_id)));
    }
    if bag.embeddings.cols() != params.config.input_dim {
        return Err(Error::Dimension(format!(
            "bag {} has {}-dim embeddings, model expects {}",
            bag.slide_id,
            bag.embeddings.cols(),
            params.config.input_dim
        )));
    }
    Ok(())
}

/// Runs the model on one bag.
pub fn mil_forward(params: &MilParams, bag: &Bag) -> Result<ForwardCache> {
    check_bag(params, bag)?;
    let n = bag.len();
    let k = params.config.n_classes;

    let mut proj_pre = bag.embeddings.matmul_t(&params.w_proj)?;
    let bias = params.b_proj.data();
    for i in 0..n {
        for (z, b) in proj_pre.row_mut(i).iter_mut().zip(bias) {
            *z += b;
        }
    }
    let proj = match params.config.proj_activation {
        ProjActivation::Linear => proj_pre.clone(),
        ProjActivation::Rectified => proj_pre.map(|x| x.max(0.0)),
    };

    let tanh_branch = proj.matmul_t(&params.v)?.map(f64::tanh);
    let gate_branch = proj.matmul_t(&params.u)?.map(sigmoid);
    let mut gated = tanh_branch.clone();
    for (g, s) in gated.data_mut().iter_mut().zip(gate_branch.data()) {
        *g *= s;
    }
    let scores = gated.matmul_t(&params.w_attn)?;

    let mut attention = Matrix::zeros(n, k);
    for c in 0..k {
        let col = softmax(&scores.column(c))?;
        for (i, a) in col.into_iter().enumerate() {
            attention.set(i, c, a);
        }
    }

    let bag_reps = attention.t_matmul(&proj)?;
    let logits: Vec<f64> = (0..k)
        .map(|c| dot(params.w_clf.row(c), bag_reps.row(c)) + params.b_clf.data()[c])
        .collect();

    Ok(ForwardCache {
        logits,
        attention,
        bag_reps,
        scores,
        proj_pre,
        proj,
        tanh_branch,
        gate_branch,
        gated,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy of the bag label and its exact gradient for every block.
pub fn mil_loss_and_grad(params: &MilParams, bag: &Bag) -> Result<(f64, MilParams)> {
    let label = bag
        .label
        .ok_or_else(|| Error::Contract(format!("bag {} has no label to train on", bag.slide_id)))?;
    let fwd = mil_forward(params, bag)?;
    let loss = cross_entropy_from_logits(&fwd.logits, label)?;
    let grads = backward(params, bag, &fwd, label)?;
    Ok((loss, grads))
}

fn backward(params: &MilParams, bag: &Bag, fwd: &ForwardCache, label: usize) -> Result<MilParams> {
    let n = bag.len();
    let k = params.config.n_classes;
    let mut grads = MilParams::zeros(params.config);

    // logits
    let mut d_logits = softmax(&fwd.logits)?;
    d_logits[label] -= 1.0;

    // per-class heads
    let mut d_reps = Matrix::zeros(k, params.config.proj_dim);
    for (c, &g) in d_logits.iter().enumerate() {
        for (dw, r) in grads.w_clf.row_mut(c).iter_mut().zip(fwd.bag_reps.row(c)) {
            *dw = g * r;
        }
        for (dr, w) in d_reps.row_mut(c).iter_mut().zip(params.w_clf.row(c)) {
            *dr = g * w;
        }
    }
    grads.b_clf.data_mut().copy_from_slice(&d_logits);

    // pooling: rep_c = Σᵢ a_ic zᵢ
    let mut d_proj = fwd.attention.matmul(&d_reps)?;
    let d_attn = fwd.proj.matmul_t(&d_reps)?;

    // softmax over patches, per class column
    let mut d_scores = Matrix::zeros(n, k);
    for c in 0..k {
        let inner: f64 = (0..n)
            .map(|i| fwd.attention.get(i, c) * d_attn.get(i, c))
            .sum();
        for i in 0..n {
            let a = fwd.attention.get(i, c);
            d_scores.set(i, c, a * (d_attn.get(i, c) - inner));
        }
    }

    grads.w_attn = d_scores.t_matmul(&fwd.gated)?;
    let d_gated = d_scores.matmul(&params.w_attn)?;

    // gated branches
    let mut d_tanh_pre = d_gated.clone();
    let mut d_gate_pre = d_gated;
    for (((dt, dg), &t), &s) in d_tanh_pre
        .data_mut()
        .iter_mut()
        .zip(d_gate_pre.data_mut())
        .zip(fwd.tanh_branch.data())
        .zip(fwd.gate_branch.data())
    {
        let upstream = *dt;
        *dt = upstream * s * (1.0 - t * t);
        *dg = upstream * t * s * (1.0 - s);
    }
    grads.v = d_tanh_pre.t_matmul(&fwd.proj)?;
    grads.u = d_gate_pre.t_matmul(&fwd.proj)?;
    d_proj.add_scaled(1.0, &d_tanh_pre.matmul(&params.v)?)?;
    d_proj.add_scaled(1.0, &d_gate_pre.matmul(&params.u)?)?;

    // projection
    if params.config.proj_activation == ProjActivation::Rectified {
        for (d, &pre) in d_proj.data_mut().iter_mut().zip(fwd.proj_pre.data()) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
    }
    grads.w_proj = d_proj.t_matmul(&bag.embeddings)?;
    grads.b_proj = Matrix::row_vector(&d_proj.column_sums());
    Ok(grads)
}

/// Highest-logit class, lowest index on exact ties.
pub fn predict(params: &MilParams, bag: &Bag) -> Result<Prediction> {
    let fwd = mil_forward(params, bag)?;
    let class = argmax(&fwd.logits).expect("n_classes >= 2");
    Ok(Prediction {
        class,
        logits: fwd.logits,
        attention: fwd.attention,
    })
}
