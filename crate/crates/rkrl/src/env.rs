//! Parameterized cart-pole dynamics with episode-level uncertainty sets.
//!
//! Physics follow the classic gym CartPole-v0 model: Euler integration with
//! step `tau`, position updated with the old velocity, failure when the cart
//! leaves +/-2.4 m or the pole exceeds 12 degrees. The varied parameters are
//! the cart mass and the pole (half-)length; everything else is fixed at the
//! CartPole-v0 constants.

use rand::Rng;

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const POLE_MASS: f64 = 0.1;
pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT_RAD: f64 = 12.0 * std::f64::consts::PI / 180.0;
/// CartPole-v0 truncates episodes at 200 steps, so 200 is the maximum
/// cumulative reward and the 195 success bar is attainable.
pub const EPISODE_CAP: usize = 200;

pub const NOMINAL_CART_MASS: f64 = 1.5;
pub const NOMINAL_POLE_LENGTH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    /// Gym's `length` attribute, i.e. half the pole length.
    pub pole_length: f64,
    pub pole_mass: f64,
    pub gravity: f64,
    pub force_mag: f64,
    pub tau: f64,
}

impl CartPoleParams {
    pub fn with_psi(cart_mass: f64, pole_length: f64) -> Result<Self> {
        let p = CartPoleParams {
            cart_mass,
            pole_length,
            pole_mass: POLE_MASS,
            gravity: GRAVITY,
            force_mag: FORCE_MAG,
            tau: TAU,
        };
        p.validate()?;
        Ok(p)
    }

    /// The parameters the true environment uses during training:
    /// cart mass 1.5 kg, pole length 0.5 m.
    pub fn nominal() -> Self {
        CartPoleParams::with_psi(NOMINAL_CART_MASS, NOMINAL_POLE_LENGTH).expect("static values")
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cart_mass > 0.0
            && self.pole_length > 0.0
            && self.pole_mass >= 0.0
            && self.tau > 0.0
            && [
                self.cart_mass,
                self.pole_length,
                self.pole_mass,
                self.gravity,
                self.force_mag,
                self.tau,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                what: "cart-pole parameters",
                message: format!("{self:?}"),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn features(&self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn is_terminal(&self) -> bool {
        self.x.abs() > X_LIMIT || self.theta.abs() > THETA_LIMIT_RAD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Left,
    Right,
}

impl Action {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            Action::Left => 0,
            Action::Right => 1,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(Action::Left),
            1 => Ok(Action::Right),
            _ => Err(Error::ActionOutOfRange {
                action: index,
                n_actions: Action::COUNT,
            }),
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            Action::Left => Action::Right,
            Action::Right => Action::Left,
        }
    }
}

/// Fresh episode start: all four components i.i.d. uniform on [-0.05, 0.05].
pub fn reset(rng: &mut impl Rng) -> CartPoleState {
    let mut draw = || rng.random_range(-0.05..=0.05);
    CartPoleState {
        x: draw(),
        x_dot: draw(),
        theta: draw(),
        theta_dot: draw(),
    }
}

/// One Euler step of the cart-pole dynamics under `params`.
///
/// Returns the next state, the step reward (1.0; callers only step live
/// states, so the pre-transition episode has not terminated), and whether the
/// post-step state is out of bounds.
pub fn step_dynamics(
    state: CartPoleState,
    action: Action,
    params: &CartPoleParams,
) -> (CartPoleState, f64, bool) {
    let total_mass = params.cart_mass + params.pole_mass;
    let polemass_length = params.pole_mass * params.pole_length;
    let force = match action {
        Action::Right => params.force_mag,
        Action::Left => -params.force_mag,
    };
    let cos_theta = state.theta.cos();
    let sin_theta = state.theta.sin();

    let temp = (force + polemass_length * state.theta_dot * state.theta_dot * sin_theta)
        / total_mass;
    let theta_acc = (params.gravity * sin_theta - cos_theta * temp)
        / (params.pole_length * (4.0 / 3.0 - params.pole_mass * cos_theta * cos_theta / total_mass));
    let x_acc = temp - polemass_length * theta_acc * cos_theta / total_mass;

    // Gym order: positions advance with the old velocities.
    let next = CartPoleState {
        x: state.x + params.tau * state.x_dot,
        x_dot: state.x_dot + params.tau * x_acc,
        theta: state.theta + params.tau * state.theta_dot,
        theta_dot: state.theta_dot + params.tau * theta_acc,
    };
    (next, 1.0, next.is_terminal())
}

/// Per-parameter sampling ranges for the uncertainty set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRanges {
    pub pole_length_min: f64,
    pub pole_length_max: f64,
    pub cart_mass_min: f64,
    pub cart_mass_max: f64,
}

impl ParamRanges {
    /// The ranges used in the cart-pole experiment: pole length 0.2-1.4 m,
    /// cart mass 0.1-7 kg.
    pub fn default_experiment() -> Self {
        ParamRanges {
            pole_length_min: 0.2,
            pole_length_max: 1.4,
            cart_mass_min: 0.1,
            cart_mass_max: 7.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.pole_length_min > 0.0
            && self.cart_mass_min > 0.0
            && self.pole_length_min <= self.pole_length_max
            && self.cart_mass_min <= self.cart_mass_max
            && [
                self.pole_length_min,
                self.pole_length_max,
                self.cart_mass_min,
                self.cart_mass_max,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                what: "parameter ranges",
                message: format!("{self:?}"),
            })
        }
    }
}

/// Finite set of physics parameter vectors; under deterministic dynamics each
/// candidate induces a point-mass transition model.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySet {
    pub candidates: Vec<CartPoleParams>,
    pub ranges: ParamRanges,
}

impl UncertaintySet {
    pub fn singleton(params: CartPoleParams, ranges: ParamRanges) -> Self {
        UncertaintySet {
            candidates: vec![params],
            ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Draws k pole lengths then k cart masses, each uniform over its range.
///
/// With `cross_product` false (the default reading of "sampled 5 values from
/// each range"), candidate i pairs the i-th pole-length draw with the i-th
/// cart-mass draw. With `cross_product` true, all k*k combinations form the
/// set.
pub fn sample_uncertainty_set(
    rng: &mut impl Rng,
    ranges: &ParamRanges,
    k: usize,
    cross_product: bool,
) -> Result<UncertaintySet> {
    ranges.validate()?;
    if k == 0 {
        return Err(Error::InvalidArgument {
            what: "uncertainty set size",
            message: "k must be at least 1".into(),
        });
    }
    let lengths: Vec<f64> = (0..k)
        .map(|_| rng.random_range(ranges.pole_length_min..=ranges.pole_length_max))
        .collect();
    let masses: Vec<f64> = (0..k)
        .map(|_| rng.random_range(ranges.cart_mass_min..=ranges.cart_mass_max))
        .collect();
    let candidates = if cross_product {
        lengths
            .iter()
            .flat_map(|&l| masses.iter().map(move |&m| (m, l)))
            .map(|(m, l)| CartPoleParams::with_psi(m, l))
            .collect::<Result<Vec<_>>>()?
    } else {
        lengths
            .iter()
            .zip(&masses)
            .map(|(&l, &m)| CartPoleParams::with_psi(m, l))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(UncertaintySet {
        candidates,
        ranges: *ranges,
    })
}

/// The hypothetical next state under every candidate parameter vector, in
/// candidate order, with each candidate's terminal flag.
pub fn candidate_next_states(
    state: CartPoleState,
    action: Action,
    uset: &UncertaintySet,
) -> Vec<(CartPoleState, bool)> {
    uset.candidates
        .iter()
        .map(|params| {
            let (next, _, terminal) = step_dynamics(state, action, params);
            (next, terminal)
        })
        .collect()
}
