//! Adam over groups of flat parameter slices.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Adam state for one parameter group. The group may be presented as
/// several slices; moments are indexed by the concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update. `params` and `grads` must cover `len()` values in total.
    pub fn update<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut [f64]>,
        grads: impl IntoIterator<Item = &'b [f64]>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        let mut off = 0;
        for (p, g) in params.into_iter().zip(grads) {
            assert_eq!(p.len(), g.len(), "parameter and gradient slices differ in length");
            let m = &mut self.m[off..off + p.len()];
            let v = &mut self.v[off..off + p.len()];
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= step_size * m[i] / ((v[i] / bc2).sqrt() + EPSILON);
            }
            off += p.len();
        }
        assert_eq!(off, self.m.len(), "parameter group size changed without resizing the optimizer");
    }

    pub fn update_one(&mut self, params: &mut [f64], grads: &[f64]) {
        self.update([params], [grads]);
    }

    /// Keeps rows (of `width` values) for which `keep` is true.
    pub fn retain_rows(&mut self, keep: &[bool], width: usize) {
        assert_eq!(keep.len() * width, self.m.len());
        let filter = |x: &Vec<f64>| -> Vec<f64> {
            x.chunks(width).zip(keep).filter(|(_, &k)| k).flat_map(|(c, _)| c.iter().copied()).collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }

    /// Appends zero moments for new parameters.
    pub fn extend_zeros(&mut self, count: usize) {
        self.m.resize(self.m.len() + count, 0.0);
        self.v.resize(self.v.len() + count, 0.0);
    }
}
