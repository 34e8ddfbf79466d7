use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewD, Ix1, Ix2};

/// A trainable tensor together with its accumulated gradient.
///
/// Gradients accumulate across backward calls until `zero_grad`; the
/// optimizer consumes them in traversal order.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(shape.to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn as1(&self) -> ArrayView1<'_, f64> {
        self.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    pub fn as2(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn view(&self) -> ArrayViewD<'_, f64> {
        self.value.view()
    }
}

/// Visits every parameter of a composite module with a stable, canonical
/// name. Traversal order is deterministic and identical between `visit`
/// and `visit_mut`; checkpoints, EMA updates and the optimizer all rely
/// on that.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Non-trainable state (e.g. batch-norm running statistics). Saved in
    /// checkpoints, skipped by the optimizer and EMA.
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &ArrayD<f64>)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {}
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params<M: Parameterized + ?Sized>(m: &M) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

pub fn param_names<M: Parameterized + ?Sized>(m: &M) -> Vec<String> {
    let mut out = Vec::new();
    m.visit("", &mut |name, _| out.push(name.to_string()));
    out
}

pub fn num_params<M: Parameterized + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.len());
    n
}

pub fn zero_grads<M: Parameterized + ?Sized>(m: &mut M) {
    m.visit_mut("", &mut |_, p| p.zero_grad());
}

/// Squared L2 norm of all accumulated gradients.
pub fn grad_sq_norm<M: Parameterized + ?Sized>(m: &M) -> f64 {
    let mut n = 0.0;
    m.visit("", &mut |_, p| n += p.grad.iter().map(|g| g * g).sum::<f64>());
    n
}
