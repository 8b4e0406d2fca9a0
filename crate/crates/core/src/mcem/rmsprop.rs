/// Root-mean-square propagation for gradient *ascent*:
/// `v <- a v + (1 - a) g^2`, `p <- p + lr g / (sqrt(v) + floor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub v: Vec<f64>,
    pub decay: f64,
    pub lr: f64,
    pub floor: f64,
}

impl RmspropState {
    pub fn new(len: usize, decay: f64, lr: f64) -> Self {
        RmspropState {
            v: vec![0.0; len],
            decay,
            lr,
            floor: 1e-8,
        }
    }
}

pub fn rmsprop_step(param: &mut [f64], grad: &[f64], st: &mut RmspropState) {
    assert_eq!(
        param.len(),
        grad.len(),
        "parameter and gradient lengths differ"
    );
    assert_eq!(
        param.len(),
        st.v.len(),
        "parameter and accumulator lengths differ"
    );
    let (a, lr, floor) = (st.decay, st.lr, st.floor);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(st.v.iter_mut()) {
        *v = a * *v + (1.0 - a) * g * g;
        *p += lr * g / (v.sqrt() + floor);
    }
}
