//! Post-training evaluation: fixed-parameter test episodes and the
//! pole-length x cart-mass robustness sweep.
//!
//! Grid points evaluate independently with RNG streams derived from the
//! evaluation seed and the parameter values, so sweeps are order-independent
//! and parallelize without changing any number.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agents::{select_action, AgentKind};
use crate::env::{reset, step_dynamics, Action, CartPoleParams, EPISODE_CAP};
use crate::error::{Error, Result};
use crate::nn::{Topology, WeightVector};
use crate::rng::point_rng;

/// Cumulative reward above this bar counts the episode as a success.
pub const SUCCESS_THRESHOLD: f64 = 195.0;

pub const REPORT_HEADER: &str = "pole_length,cart_mass,mean_reward,std_reward,success_rate,episodes";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub params: CartPoleParams,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

/// Runs `episodes` epsilon-greedy episodes under fixed physics parameters
/// (no uncertainty sampling) and aggregates the cumulative rewards.
pub fn run_test_episodes(
    topology: &Topology,
    weights: &WeightVector,
    params: &CartPoleParams,
    episodes: usize,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::InvalidArgument {
            what: "evaluation episodes",
            message: "must be at least 1".into(),
        });
    }
    params.validate()?;
    let mut rewards = Vec::with_capacity(episodes);
    let mut successes = 0usize;
    for _ in 0..episodes {
        let mut state = reset(rng);
        let mut cumulative = 0.0;
        for _ in 0..EPISODE_CAP {
            let action_idx = select_action(topology, weights, &state, epsilon, rng)?;
            let (next, reward, terminal) =
                step_dynamics(state, Action::from_index(action_idx)?, params);
            cumulative += reward;
            state = next;
            if terminal {
                break;
            }
        }
        if cumulative > SUCCESS_THRESHOLD {
            successes += 1;
        }
        rewards.push(cumulative);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = if rewards.len() == 1 {
        0.0
    } else {
        (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(EvalResult {
        params: *params,
        mean_reward: mean,
        std_reward: std,
        success_rate: successes as f64 / n,
        episodes,
    })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub grid: Vec<EvalResult>,
    pub agent: AgentKind,
    pub seed: u64,
}

/// Number of threads for sweep evaluation: the RKRL_THREADS environment
/// variable when set, otherwise the number of logical cores.
fn sweep_threads() -> usize {
    std::env::var("RKRL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Evaluates the full pole-length x cart-mass grid. Each point draws its RNG
/// from (seed, pole_length, cart_mass), so serial and parallel execution and
/// any axis ordering produce identical reports.
pub fn sweep(
    topology: &Topology,
    weights: &WeightVector,
    pole_lengths: &[f64],
    cart_masses: &[f64],
    episodes: usize,
    epsilon: f64,
    seed: u64,
    agent: AgentKind,
) -> Result<SweepReport> {
    if pole_lengths.is_empty() || cart_masses.is_empty() {
        return Err(Error::InvalidArgument {
            what: "sweep axes",
            message: "both axes must be non-empty".into(),
        });
    }
    let mut points = Vec::with_capacity(pole_lengths.len() * cart_masses.len());
    for &pl in pole_lengths {
        for &cm in cart_masses {
            points.push((pl, cm));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::InvalidArgument {
            what: "sweep thread pool",
            message: e.to_string(),
        })?;
    let grid = pool.install(|| {
        points
            .par_iter()
            .map(|&(pl, cm)| {
                let params = CartPoleParams::with_psi(cm, pl)?;
                let mut rng = point_rng(seed, pl, cm);
                run_test_episodes(topology, weights, &params, episodes, epsilon, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SweepReport { grid, agent, seed })
}

/// Formats with six significant digits, plain decimal notation.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (5 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

fn result_row(r: &EvalResult) -> String {
    format!(
        "{},{},{},{},{},{}",
        format_sig6(r.params.pole_length),
        format_sig6(r.params.cart_mass),
        format_sig6(r.mean_reward),
        format_sig6(r.std_reward),
        format_sig6(r.success_rate),
        r.episodes
    )
}

/// Writes the sweep CSV, rows sorted by (pole_length, cart_mass).
pub fn write_report(report: &SweepReport, path: &Path) -> Result<()> {
    let mut rows: Vec<&EvalResult> = report.grid.iter().collect();
    rows.sort_by(|a, b| {
        (a.params.pole_length, a.params.cart_mass)
            .partial_cmp(&(b.params.pole_length, b.params.cart_mass))
            .expect("finite parameters")
    });
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&result_row(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Appends one evaluation row to a CSV, creating it with a header first.
pub fn append_result(result: &EvalResult, path: &Path) -> Result<()> {
    let exists = path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !exists {
        writeln!(file, "{REPORT_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(file, "{}", result_row(result)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn topo() -> Topology {
        Topology::cartpole_default()
    }

    #[test]
    fn constant_action_policy_never_succeeds() {
        // Zero weights tie both Q values, the tie-break picks Left every
        // step, and a constant push loses the pole well before 195 reward.
        let topo = topo();
        let w = DVector::zeros(topo.weight_count());
        let mut rng = point_rng(1, 0.5, 1.5);
        let r = run_test_episodes(&topo, &w, &CartPoleParams::nominal(), 50, 0.0, &mut rng).unwrap();
        assert_eq!(r.success_rate, 0.0);
        assert!(r.mean_reward < 100.0);
    }

    #[test]
    fn single_episode_has_zero_std() {
        let topo = topo();
        let w = DVector::zeros(topo.weight_count());
        let mut rng = point_rng(2, 0.5, 1.5);
        let r = run_test_episodes(&topo, &w, &CartPoleParams::nominal(), 1, 0.1, &mut rng).unwrap();
        assert_eq!(r.std_reward, 0.0);
        assert_eq!(r.episodes, 1);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let topo = topo();
        let w = topo.init_weights(5, 0.05).unwrap();
        let mut r1 = point_rng(3, 0.5, 1.5);
        let mut r2 = point_rng(3, 0.5, 1.5);
        let a = run_test_episodes(&topo, &w, &CartPoleParams::nominal(), 20, 0.1, &mut r1).unwrap();
        let b = run_test_episodes(&topo, &w, &CartPoleParams::nominal(), 20, 0.1, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn success_count_is_integral() {
        let topo = topo();
        let w = topo.init_weights(6, 0.05).unwrap();
        let mut rng = point_rng(4, 0.5, 1.5);
        let r = run_test_episodes(&topo, &w, &CartPoleParams::nominal(), 37, 0.1, &mut rng).unwrap();
        let count = r.success_rate * r.episodes as f64;
        assert!((count - count.round()).abs() < 1e-9);
        assert!((0.0..=200.0).contains(&r.mean_reward));
    }

    #[test]
    fn one_by_one_grid_equals_direct_evaluation() {
        let topo = topo();
        let w = topo.init_weights(7, 0.05).unwrap();
        let report = sweep(&topo, &w, &[0.7], &[2.0], 10, 0.1, 11, AgentKind::RtdDqn).unwrap();
        assert_eq!(report.grid.len(), 1);
        let mut rng = point_rng(11, 0.7, 2.0);
        let direct = run_test_episodes(
            &topo,
            &w,
            &CartPoleParams::with_psi(2.0, 0.7).unwrap(),
            10,
            0.1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.grid[0], direct);
    }

    #[test]
    fn grid_size_and_axis_permutation_invariance() {
        let topo = topo();
        let w = topo.init_weights(8, 0.05).unwrap();
        let a = sweep(
            &topo,
            &w,
            &[0.2, 0.8],
            &[1.0, 3.0, 5.0],
            5,
            0.1,
            9,
            AgentKind::DeepRok,
        )
        .unwrap();
        assert_eq!(a.grid.len(), 6);
        let b = sweep(
            &topo,
            &w,
            &[0.8, 0.2],
            &[5.0, 3.0, 1.0],
            5,
            0.1,
            9,
            AgentKind::DeepRok,
        )
        .unwrap();
        let key = |r: &EvalResult| (r.params.pole_length.to_bits(), r.params.cart_mass.to_bits());
        let mut sa: Vec<_> = a.grid.clone();
        sa.sort_by_key(key);
        let mut sb: Vec<_> = b.grid.clone();
        sb.sort_by_key(key);
        assert_eq!(sa, sb);
    }

    #[test]
    fn serial_and_parallel_sweeps_are_byte_identical() {
        let topo = topo();
        let w = topo.init_weights(9, 0.05).unwrap();
        let run = |threads: &str| {
            std::env::set_var("RKRL_THREADS", threads);
            let report = sweep(
                &topo,
                &w,
                &[0.2, 0.6, 1.0],
                &[0.5, 2.0],
                5,
                0.1,
                13,
                AgentKind::DoubleDqn,
            )
            .unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            write_report(&report, &path).unwrap();
            std::fs::read(&path).unwrap()
        };
        let serial = run("1");
        let parallel = run("4");
        std::env::remove_var("RKRL_THREADS");
        assert_eq!(serial, parallel);
    }

    #[test]
    fn report_round_trips_through_parse() {
        let topo = topo();
        let w = topo.init_weights(10, 0.05).unwrap();
        let report = sweep(&topo, &w, &[0.5], &[1.5], 8, 0.1, 17, AgentKind::RtdDqn).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), REPORT_HEADER);
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 6);
        let parsed: f64 = fields[2].parse().unwrap();
        let diff = (parsed - report.grid[0].mean_reward).abs();
        assert!(diff <= 1e-3 * report.grid[0].mean_reward.abs().max(1.0));
        // byte-identical on rewrite
        let again = dir.path().join("r2.csv");
        write_report(&report, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(0.1), "0.100000");
        assert_eq!(format_sig6(199.998), "199.998");
        assert_eq!(format_sig6(200.0), "200.000");
        assert_eq!(format_sig6(0.0123456789), "0.0123457");
        assert_eq!(format_sig6(-7.25), "-7.25000");
        assert_eq!(format_sig6(1.0), "1.00000");
    }

    #[test]
    fn empty_axes_rejected() {
        let topo = topo();
        let w = DVector::zeros(topo.weight_count());
        assert!(sweep(&topo, &w, &[], &[1.0], 5, 0.1, 1, AgentKind::RtdDqn).is_err());
        assert!(sweep(&topo, &w, &[0.5], &[], 5, 0.1, 1, AgentKind::RtdDqn).is_err());
    }

    #[test]
    fn append_creates_header_then_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let r = EvalResult {
            params: CartPoleParams::nominal(),
            mean_reward: 123.456,
            std_reward: 7.0,
            success_rate: 0.5,
            episodes: 10,
        };
        append_result(&r, &path).unwrap();
        append_result(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], lines[2]);
    }
}
