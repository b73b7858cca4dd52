use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable tensor stored flat, with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Zero-mean normal entries with standard deviation `sqrt(2 / fan_in)`.
    pub fn he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Param::zeros(shape);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for v in &mut p.value {
            *v = normal.sample(rng) as f32;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (1, 1),
        }
    }

    /// Leading axis by the product of the others.
    pub fn matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape(self.dims2(), &self.value).expect("consistent shape")
    }

    pub fn grad_matrix_mut(&mut self) -> ArrayViewMut2<'_, f32> {
        let dims = self.dims2();
        ArrayViewMut2::from_shape(dims, &mut self.grad).expect("consistent shape")
    }

    pub fn vector(&self) -> ArrayView1<'_, f32> {
        ArrayView1::from(&self.value[..])
    }

    pub fn grad_vector_mut(&mut self) -> ArrayViewMut1<'_, f32> {
        ArrayViewMut1::from(&mut self.grad[..])
    }
}

/// Anything that owns named parameters. Names are dotted paths and the
/// visiting order is fixed, which makes it the serialization order too.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
