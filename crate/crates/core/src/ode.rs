//! Classical fixed-step fourth-order Runge–Kutta.

/// Autonomous or time-varying first-order system `ẏ = f(t, y)`.
pub trait OdeSystem {
    type Error;

    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), Self::Error>;
}

/// Reusable RK4 stepper; owns its stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advance `y` in place from `t` to `t + dt`.
    pub fn step<S: OdeSystem>(&mut self, sys: &S, t: f64, y: &mut [f64], dt: f64) -> Result<(), S::Error> {
        let half = 0.5 * dt;
        sys.rhs(t, y, &mut self.k1)?;
        for i in 0..y.len() {
            self.tmp[i] = y[i] + half * self.k1[i];
        }
        sys.rhs(t + half, &self.tmp, &mut self.k2)?;
        for i in 0..y.len() {
            self.tmp[i] = y[i] + half * self.k2[i];
        }
        sys.rhs(t + half, &self.tmp, &mut self.k3)?;
        for i in 0..y.len() {
            self.tmp[i] = y[i] + dt * self.k3[i];
        }
        sys.rhs(t + dt, &self.tmp, &mut self.k4)?;
        let sixth = dt / 6.0;
        for i in 0..y.len() {
            y[i] += sixth * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
        Ok(())
    }
}

/// Number of fixed steps of size `dt` covering `[0, t_end]`.
pub fn step_count(t_end: f64, dt: f64) -> usize {
    (t_end / dt).round() as usize
}

/// Closure adapter, handy for tests and small one-off systems.
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    type Error = std::convert::Infallible;

    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), Self::Error> {
        (self.f)(t, y, dy);
        Ok(())
    }
}

/// Integrate over `[0, t_end]` and return the terminal state.
pub fn integrate_terminal<S: OdeSystem>(sys: &S, y0: &[f64], t_end: f64, dt: f64) -> Result<Vec<f64>, S::Error> {
    let mut y = y0.to_vec();
    let mut rk = Rk4::new(y.len());
    for k in 0..step_count(t_end, dt) {
        rk.step(sys, k as f64 * dt, &mut y, dt)?;
    }
    Ok(y)
}
