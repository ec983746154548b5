use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

/// Plain SGD with decoupled-from-nothing L2 weight decay:
/// `p ← p − lr·(grad + weight_decay·p)`. Gradients are cleared afterwards.
///
/// Every parameter must carry a gradient; the first one without fails the
/// whole step before anything is modified.
pub fn sgd_step<'a, T, I>(params: I, lr: T, weight_decay: T) -> Result<()>
where
    T: Real,
    I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
{
    let params: Vec<_> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    for (_, p) in params {
        let g = p.take_grad().expect("checked above");
        for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (gi + weight_decay * *w);
        }
    }
    Ok(())
}

/// SGD with an optional heavy-ball momentum buffer per parameter. With
/// `momentum == 0` this is exactly [`sgd_step`].
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Real = f32> {
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: T) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) {
        self.velocity = velocity;
    }

    pub fn step<'a, I>(&mut self, params: I, lr: T, weight_decay: T) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        if self.momentum == T::zero() {
            return sgd_step(params, lr, weight_decay);
        }
        let params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::MissingGradient(name.to_string()));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| Tensor::zeros_like(p)).collect();
        }
        for ((_, p), v) in params.into_iter().zip(&mut self.velocity) {
            let g = p.take_grad().expect("checked above");
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + weight_decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}
