//! Agent-level simulation: Euler–Maruyama steps of
//! `dX = v(X) dt + √(2σ) dB` with mirror reflection at the walls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Rect, VectorField};

/// `N` agents with one independent random stream each.
///
/// Agent `i` draws from ChaCha stream `i` of the run seed, so its noise does
/// not depend on how many agents exist or how updates are scheduled.
#[derive(Clone, Debug)]
pub struct Swarm {
    positions: Vec<[f64; 2]>,
    streams: Vec<ChaCha8Rng>,
    domain: Rect,
}

impl Swarm {
    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn domain(&self) -> &Rect {
        &self.domain
    }

    /// Agent dump: one `x y` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * 40);
        for [x, y] in &self.positions {
            out.push_str(&format!("{x:.12e} {y:.12e}\n"));
        }
        out
    }
}

/// Draws `n` i.i.d. uniform positions on `region ⊆ domain`.
pub fn init_swarm(n: usize, region: &Rect, domain: &Rect, seed: u64) -> Result<Swarm> {
    if n == 0 {
        return Err(Error::param("n_agents", "must be at least 1"));
    }
    if !region.is_within(domain) {
        return Err(Error::param("init_region", "must lie inside the domain"));
    }
    let base = ChaCha8Rng::seed_from_u64(seed);
    let mut streams: Vec<ChaCha8Rng> = (0..n as u64)
        .map(|i| {
            let mut rng = base.clone();
            rng.set_stream(i);
            rng
        })
        .collect();
    let positions = streams
        .iter_mut()
        .map(|rng| {
            let u: f64 = rng.gen();
            let w: f64 = rng.gen();
            [
                region.x_min + u * region.width(),
                region.y_min + w * region.height(),
            ]
        })
        .collect();
    Ok(Swarm {
        positions,
        streams,
        domain: *domain,
    })
}

/// Bilinear interpolation of cell-center values; points outside the hull
/// of cell centers use the nearest interpolation point.
pub fn sample_velocity(v: &VectorField, x: f64, y: f64) -> Result<[f64; 2]> {
    let g = v.grid();
    if !g.domain().contains(x, y) {
        return Err(Error::OutsideDomain { x, y });
    }
    let (i0, i1, tx) = bracket((x - g.domain().x_min) / g.dx() - 0.5, g.nx());
    let (j0, j1, ty) = bracket((y - g.domain().y_min) / g.dy() - 0.5, g.ny());
    let lerp = |c: &[f64]| {
        let bottom = c[g.index(i0, j0)] * (1.0 - tx) + c[g.index(i1, j0)] * tx;
        let top = c[g.index(i0, j1)] * (1.0 - tx) + c[g.index(i1, j1)] * tx;
        bottom * (1.0 - ty) + top * ty
    };
    Ok([lerp(v.x()), lerp(v.y())])
}

fn bracket(s: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let s = s.clamp(0.0, (n - 1) as f64);
    let i0 = (s.floor() as usize).min(n - 2);
    (i0, i0 + 1, s - i0 as f64)
}

/// Mirror a coordinate back into `[lo, hi]`.
pub fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    while x < lo || x > hi {
        if x < lo {
            x = 2.0 * lo - x;
        } else {
            x = 2.0 * hi - x;
        }
    }
    x
}

/// Advances every agent by one Euler–Maruyama step under the frozen field.
pub fn step_swarm(swarm: &mut Swarm, v: &VectorField, sigma: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::param("dt", "must be positive"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", "must be finite and nonnegative"));
    }
    let noise = (2.0 * sigma * dt).sqrt();
    let d = swarm.domain;
    swarm
        .positions
        .par_iter_mut()
        .zip(swarm.streams.par_iter_mut())
        .try_for_each(|(pos, rng)| {
            let [vx, vy] = sample_velocity(v, pos[0], pos[1])?;
            if !(vx.is_finite() && vy.is_finite()) {
                return Err(Error::NonFinite("sampled velocity"));
            }
            let (zx, zy): (f64, f64) = if noise > 0.0 {
                (rng.sample(StandardNormal), rng.sample(StandardNormal))
            } else {
                (0.0, 0.0)
            };
            pos[0] = reflect(pos[0] + vx * dt + noise * zx, d.x_min, d.x_max);
            pos[1] = reflect(pos[1] + vy * dt + noise * zy, d.y_min, d.y_max);
            Ok(())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn init_is_reproducible_and_inside_region() {
        let region = Rect::new(0.15, 0.85, 0.15, 0.85).unwrap();
        let a = init_swarm(1024, &region, &Rect::unit(), 7).unwrap();
        let b = init_swarm(1024, &region, &Rect::unit(), 7).unwrap();
        assert_eq!(a.positions(), b.positions());
        assert!(a.positions().iter().all(|p| region.contains(p[0], p[1])));
        let c = init_swarm(1024, &region, &Rect::unit(), 8).unwrap();
        assert_ne!(a.positions(), c.positions());
    }

    #[test]
    fn degenerate_region_is_a_point() {
        let region = Rect::new(0.3, 0.3, 0.6, 0.6).unwrap();
        let s = init_swarm(1, &region, &Rect::unit(), 1).unwrap();
        assert_eq!(s.positions(), &[[0.3, 0.6]]);
    }

    #[test]
    fn init_rejects_bad_inputs() {
        let outside = Rect::new(0.5, 1.5, 0.0, 1.0).unwrap();
        assert!(init_swarm(10, &outside, &Rect::unit(), 1).is_err());
        assert!(init_swarm(0, &Rect::unit(), &Rect::unit(), 1).is_err());
    }

    #[test]
    fn uniform_sample_mean_within_clt_bound() {
        let n = 100_000;
        let s = init_swarm(n, &Rect::unit(), &Rect::unit(), 2024).unwrap();
        // std of the mean of U(0,1) is sqrt(1/12 / n)
        let bound = 3.0 * (1.0 / 12.0 / n as f64).sqrt();
        for axis in 0..2 {
            let mean = s.positions().iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            assert!((mean - 0.5).abs() < bound, "axis {axis}: mean {mean}");
        }
    }

    #[test]
    fn streams_do_not_depend_on_swarm_size() {
        let a = init_swarm(10, &Rect::unit(), &Rect::unit(), 3).unwrap();
        let b = init_swarm(1000, &Rect::unit(), &Rect::unit(), 3).unwrap();
        assert_eq!(a.positions(), &b.positions()[..10]);
    }

    #[test]
    fn sampling_reproduces_constants_centers_and_affine_fields() {
        let g = Grid::unit_square(7).unwrap();
        let c = VectorField::from_fn(&g, |_, _| (0.4, -2.0));
        assert_eq!(sample_velocity(&c, 0.0, 0.93).unwrap(), [0.4, -2.0]);

        let affine = VectorField::from_fn(&g, |x, y| (x, 2.0 * y));
        let k = g.index(3, 5);
        let at = sample_velocity(&affine, g.x_center(3), g.y_center(5)).unwrap();
        assert_eq!(at, affine.at(k));
        for &(x, y) in &[(0.3, 0.41), (0.5, 0.5), (0.11, 0.86)] {
            let [a, b] = sample_velocity(&affine, x, y).unwrap();
            assert!((a - x).abs() < 1e-12 && (b - 2.0 * y).abs() < 1e-12);
        }
        assert!(sample_velocity(&affine, 1.2, 0.5).is_err());
    }

    #[test]
    fn no_motion_without_drift_or_noise() {
        let g = Grid::unit_square(5).unwrap();
        let mut s = init_swarm(50, &Rect::unit(), &Rect::unit(), 4).unwrap();
        let before = s.positions().to_vec();
        step_swarm(&mut s, &VectorField::zeros(&g), 0.0, 0.01).unwrap();
        assert_eq!(s.positions(), &before[..]);
    }

    #[test]
    fn mirror_reflection_at_the_wall() {
        let g = Grid::unit_square(4).unwrap();
        let region = Rect::new(0.999, 0.999, 0.5, 0.5).unwrap();
        let mut s = init_swarm(1, &region, &Rect::unit(), 0).unwrap();
        let dt = 0.2;
        let v = VectorField::from_fn(&g, |_, _| (0.01, 0.0));
        step_swarm(&mut s, &v, 0.0, dt).unwrap();
        let expected = 2.0 * 1.0 - (0.999 + 0.01 * dt);
        assert!((s.positions()[0][0] - expected).abs() < 1e-15);
    }

    #[test]
    fn reflection_handles_multiple_bounces() {
        assert!((reflect(2.25, 0.0, 1.0) - 0.25).abs() < 1e-15);
        assert!((reflect(-0.25, 0.0, 1.0) - 0.25).abs() < 1e-15);
        assert!((reflect(-1.25, 0.0, 1.0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn positions_stay_inside_under_strong_noise() {
        let g = Grid::unit_square(5).unwrap();
        let mut s = init_swarm(500, &Rect::unit(), &Rect::unit(), 11).unwrap();
        let v = VectorField::from_fn(&g, |x, y| (3.0 * (x - 0.2), -4.0 * y));
        for _ in 0..50 {
            step_swarm(&mut s, &v, 0.5, 0.05).unwrap();
            assert!(s.positions().iter().all(|p| Rect::unit().contains(p[0], p[1])));
        }
    }

    #[test]
    fn parallel_and_serial_steps_agree() {
        let g = Grid::unit_square(6).unwrap();
        let v = VectorField::from_fn(&g, |x, y| (y - 0.5, 0.5 - x));
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut s = init_swarm(300, &Rect::unit(), &Rect::unit(), 5).unwrap();
                for _ in 0..20 {
                    step_swarm(&mut s, &v, 1e-3, 0.01).unwrap();
                }
                s.positions().to_vec()
            })
        };
        assert_eq!(run(1), run(3));
    }

    /// Reflected Brownian motion on the unit square has a uniform stationary
    /// law; chi-square over 30×30 cells with 899 degrees of freedom.
    #[test]
    fn reflected_diffusion_relaxes_to_uniform() {
        let n_cells = 30;
        let g = Grid::unit_square(n_cells).unwrap();
        let n = 20_000;
        let mut s = init_swarm(n, &Rect::new(0.4, 0.6, 0.4, 0.6).unwrap(), &Rect::unit(), 99).unwrap();
        let v = VectorField::zeros(&g);
        // σ = 5e-5 needs ~1e4 s to mix; the stationary law does not depend on
        // σ, so mix with a larger coefficient over the same number of steps.
        for _ in 0..400 {
            step_swarm(&mut s, &v, 5e-2, 0.05).unwrap();
        }
        let mut counts = vec![0usize; g.len()];
        for p in s.positions() {
            let i = ((p[0] * n_cells as f64) as usize).min(n_cells - 1);
            let j = ((p[1] * n_cells as f64) as usize).min(n_cells - 1);
            counts[g.index(i, j)] += 1;
        }
        let expected = n as f64 / g.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // upper 1% point of chi-square with 899 dof (Wilson–Hilferty)
        let k = 899.0f64;
        let z = 2.326_347_874;
        let critical = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }
}
