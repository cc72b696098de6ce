//! Parameter containers and the Adam optimizer used by the recurrent models.

/// A model (or gradient buffer) made of named flat tensors.
///
/// Gradient buffers are the same type as the parameters they belong to, so
/// `tensors()` of both yields slices in matching order.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Scale factor that brings a gradient of squared norm `sq_norm` down to
/// `max_norm`, or 1 when already inside the ball.
pub fn clip_factor(sq_norm: f64, max_norm: f64) -> f64 {
    let norm = sq_norm.sqrt();
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over dense tensors, with optional lazily-updated embedding tables.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamTensors>(cfg: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            cfg,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advance the step counter. Call once per update, before `update_dense`
    /// and any `update_rows`.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step.max(1) as i32;
        (
            1.0 - self.cfg.beta1.powi(t),
            1.0 - self.cfg.beta2.powi(t),
        )
    }

    pub fn update_dense<P: ParamTensors>(&mut self, params: &mut P, grads: &P, scale: f64) {
        let (c1, c2) = self.corrections();
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        for (idx, ((_, p), (_, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .enumerate()
        {
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Lazy Adam state for an embedding table: only rows that receive gradient
/// are touched, bias correction uses the shared step of the owning [`Adam`].
#[derive(Debug, Clone)]
pub struct RowAdam {
    dim: usize,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl RowAdam {
    pub fn new(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            first: vec![0.0; rows * dim],
            second: vec![0.0; rows * dim],
        }
    }

    pub fn update_row(&mut self, owner: &Adam, table: &mut [f64], row: usize, grad: &[f64], scale: f64) {
        let (c1, c2) = owner.corrections();
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = owner.cfg;
        let base = row * self.dim;
        for j in 0..self.dim {
            let k = base + j;
            let gj = grad[j] * scale;
            self.first[k] = beta1 * self.first[k] + (1.0 - beta1) * gj;
            self.second[k] = beta2 * self.second[k] + (1.0 - beta2) * gj * gj;
            table[k] -= lr * (self.first[k] / c1) / ((self.second[k] / c2).sqrt() + eps);
        }
    }
}

/// Declare a struct of named `Vec<f64>` tensors implementing [`ParamTensors`].
macro_rules! param_struct {
    ($(#[$meta:meta])* $vis:vis struct $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
        $vis struct $name {
            $($(#[$fmeta])* pub $field: Vec<f64>,)*
        }

        impl $crate::optim::ParamTensors for $name {
            fn tensors(&self) -> Vec<(&'static str, &[f64])> {
                vec![$((stringify!($field), self.$field.as_slice()),)*]
            }

            fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
                vec![$((stringify!($field), self.$field.as_mut_slice()),)*]
            }
        }

        impl $name {
            /// Same shapes, all zeros.
            pub fn zeros_like(&self) -> Self {
                Self { $($field: vec![0.0; self.$field.len()],)* }
            }
        }
    };
}
pub(crate) use param_struct;

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        w: Vec<f64>,
    }

    impl ParamTensors for Quadratic {
        fn tensors(&self) -> Vec<(&'static str, &[f64])> {
            vec![("w", &self.w)]
        }
        fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("w", &mut self.w)]
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Quadratic { w: vec![3.0, -2.0] };
        let mut g = Quadratic { w: vec![0.0; 2] };
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &p);
        for _ in 0..2000 {
            g.w[0] = 2.0 * (p.w[0] - 1.0);
            g.w[1] = 2.0 * (p.w[1] + 0.5);
            opt.tick();
            opt.update_dense(&mut p, &g, 1.0);
        }
        assert!((p.w[0] - 1.0).abs() < 1e-3);
        assert!((p.w[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn clip_factor_caps_norm() {
        assert_eq!(clip_factor(4.0, 5.0), 1.0);
        assert!((clip_factor(100.0, 5.0) - 0.5).abs() < 1e-15);
        assert_eq!(clip_factor(0.0, 5.0), 1.0);
    }
}
