use partwarp_autodiff::{Bind, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Standard deviation of the normal weight init used by every layer.
pub const INIT_STD: f64 = 0.02;

pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn([cout, cin, k, k], INIT_STD, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([cout])));
        Self { w, b, stride, pad }
    }

    pub fn forward<'t>(&self, bind: &Bind, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let b = self.b.map(|b| bind.var(tape, b));
        x.conv2d(bind.var(tape, self.w), b, self.stride, self.pad)
    }
}

/// Transposed convolution that doubles the spatial size (k3, s2, p1, op1).
#[derive(Clone, Debug)]
pub struct Upsample {
    w: ParamId,
}

impl Upsample {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        Self { w: store.add(format!("{name}.w"), Tensor::randn([cin, cout, 3, 3], INIT_STD, rng)) }
    }

    pub fn forward<'t>(&self, bind: &Bind, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.conv_transpose2d(bind.var(tape, self.w), None, 2, 1, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn([fan_out, fan_in], INIT_STD, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([fan_out]));
        Self { w, b }
    }

    pub fn forward<'t>(&self, bind: &Bind, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.linear(bind.var(tape, self.w), Some(bind.var(tape, self.b)))
    }
}
