use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        let dim = a
            .shape()
            .iter()
            .zip(b.shape())
            .position(|(x, y)| x != y)
            .unwrap_or(a.shape().len().min(b.shape().len()));
        return Err(AutodiffError::ShapeMismatch {
            op,
            what: format!("dimension {dim} of {:?} vs {:?}", a.shape(), b.shape()),
            expected: a.shape().get(dim).copied().unwrap_or(0),
            got: b.shape().get(dim).copied().unwrap_or(0),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op("add", data, a.shape().to_vec(), vec![a.clone(), b.clone()], |g, needs| {
        vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
    }))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let av = a.to_vec();
    let bv = b.to_vec();
    let data: Vec<f32> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op("mul", data, a.shape().to_vec(), vec![a.clone(), b.clone()], move |g, needs| {
        vec![
            needs[0].then(|| g.iter().zip(&bv).map(|(g, y)| g * y).collect()),
            needs[1].then(|| g.iter().zip(&av).map(|(g, x)| g * x).collect()),
        ]
    }))
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x * s).collect();
    Tensor::from_op("scale", data, a.shape().to_vec(), vec![a.clone()], move |g, _| {
        vec![Some(g.iter().map(|g| g * s).collect())]
    })
}

pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| x.max(0.0)).collect();
    let mask: Vec<bool> = data.iter().map(|&y| y > 0.0).collect();
    Tensor::from_op("relu", data, a.shape().to_vec(), vec![a.clone()], move |g, _| {
        vec![Some(g.iter().zip(&mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect())]
    })
}

/// Sum of all elements (f64 accumulation, row-major order).
pub fn sum(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().map(|&x| x as f64).sum();
    let n = a.len();
    Tensor::from_op("sum", vec![s as f32], vec![], vec![a.clone()], move |g, _| vec![Some(vec![g[0]; n])])
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.len().max(1);
    let s: f64 = a.data().iter().map(|&x| x as f64).sum();
    let len = a.len();
    Tensor::from_op("mean", vec![(s / n as f64) as f32], vec![], vec![a.clone()], move |g, _| {
        vec![Some(vec![g[0] / n as f32; len])]
    })
}

/// `sum_i a_i * w_i` against a constant weight vector.
pub fn dot_const(a: &Tensor, weights: &[f32]) -> Result<Tensor> {
    if weights.len() != a.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "dot_const",
            what: "element count".into(),
            expected: a.len(),
            got: weights.len(),
        });
    }
    let s: f64 = a.data().iter().zip(weights).map(|(&x, &w)| x as f64 * w as f64).sum();
    let w = weights.to_vec();
    Ok(Tensor::from_op("dot_const", vec![s as f32], vec![], vec![a.clone()], move |g, _| {
        vec![Some(w.iter().map(|w| w * g[0]).collect())]
    }))
}
