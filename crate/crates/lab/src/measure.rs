//! Finite measures on the line: atoms plus a trapezoid-integrated density.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Measure {
    /// (location, weight) pairs.
    #[serde(default)]
    pub atoms: Vec<(f64, f64)>,
    #[serde(default)]
    pub density: Option<GridDensity>,
}

impl Measure {
    pub fn dirac(x: f64) -> Self {
        Measure { atoms: vec![(x, 1.0)], density: None }
    }

    pub fn weighted_atom(x: f64, w: f64) -> Self {
        Measure { atoms: vec![(x, w)], density: None }
    }

    pub fn from_atoms(atoms: Vec<(f64, f64)>) -> Self {
        Measure { atoms, density: None }
    }

    /// Uniform probability on `[a, b]` represented by an `n`-node density.
    pub fn uniform(a: f64, b: f64, n: usize) -> Self {
        let n = n.max(2);
        let grid: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
        let values = vec![1.0 / (b - a); n];
        Measure { atoms: Vec::new(), density: Some(GridDensity { grid, values }) }
    }

    pub fn validate(&self) -> Result<()> {
        for &(x, w) in &self.atoms {
            if !x.is_finite() || !(w >= 0.0) || !w.is_finite() {
                return domain(format!("bad atom ({x}, {w})"));
            }
        }
        if let Some(d) = &self.density {
            if d.grid.len() != d.values.len() || d.grid.len() < 2 {
                return domain("density needs matching grid and values with at least two nodes");
            }
            if d.grid.windows(2).any(|w| w[1] <= w[0]) {
                return domain("density grid must be strictly increasing");
            }
            if d.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return domain("density values must be nonnegative");
            }
        }
        if self.total_mass() <= 0.0 {
            return domain("measure is empty");
        }
        Ok(())
    }

    fn density_mass(&self) -> f64 {
        self.density.as_ref().map_or(0.0, |d| {
            d.grid
                .windows(2)
                .zip(d.values.windows(2))
                .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
                .sum()
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum::<f64>() + self.density_mass()
    }

    pub fn scaled(&self, k: f64) -> Measure {
        Measure {
            atoms: self.atoms.iter().map(|&(x, w)| (x, w * k)).collect(),
            density: self.density.as_ref().map(|d| GridDensity {
                grid: d.grid.clone(),
                values: d.values.iter().map(|v| v * k).collect(),
            }),
        }
    }

    pub fn normalized(&self) -> Measure {
        self.scaled(1.0 / self.total_mass())
    }

    /// Does any positive mass sit on the set `bad`?
    pub fn charges(&self, bad: impl Fn(f64) -> bool) -> bool {
        self.atoms.iter().any(|&(x, w)| w > 0.0 && bad(x))
            || self.density.as_ref().is_some_and(|d| {
                d.grid.iter().zip(&d.values).any(|(&x, &v)| v > 0.0 && bad(x))
            })
    }

    /// ∫ f dμ: atom sum plus trapezoid rule on the density grid.
    pub fn integrate<F: FnMut(f64) -> Result<f64>>(&self, mut f: F) -> Result<f64> {
        let mut s = 0.0;
        for &(x, w) in &self.atoms {
            if w != 0.0 {
                s += w * f(x)?;
            }
        }
        if let Some(d) = &self.density {
            let fv: Vec<f64> = d
                .grid
                .iter()
                .zip(&d.values)
                .map(|(&x, &v)| if v == 0.0 { Ok(0.0) } else { f(x).map(|y| y * v) })
                .collect::<Result<_>>()?;
            for i in 0..fv.len() - 1 {
                s += 0.5 * (d.grid[i + 1] - d.grid[i]) * (fv[i] + fv[i + 1]);
            }
        }
        Ok(s)
    }
}

/// Draws from a measure normalized to a probability.
#[derive(Debug, Clone)]
pub struct MeasureSampler {
    atoms: Vec<f64>,
    cells: Vec<(f64, f64, f64, f64)>,
    cum: Vec<f64>,
}

impl MeasureSampler {
    pub fn new(m: &Measure) -> Result<Self> {
        m.validate()?;
        let total = m.total_mass();
        let mut cum = Vec::new();
        let mut acc = 0.0;
        let mut atoms = Vec::new();
        for &(x, w) in &m.atoms {
            acc += w / total;
            cum.push(acc);
            atoms.push(x);
        }
        let mut cells = Vec::new();
        if let Some(d) = &m.density {
            for i in 0..d.grid.len() - 1 {
                let (x0, x1, f0, f1) = (d.grid[i], d.grid[i + 1], d.values[i], d.values[i + 1]);
                acc += 0.5 * (x1 - x0) * (f0 + f1) / total;
                cum.push(acc);
                cells.push((x0, x1, f0, f1));
            }
        }
        Ok(MeasureSampler { atoms, cells, cum })
    }

    /// Single-atom measures need no randomness.
    pub fn deterministic(&self) -> Option<f64> {
        (self.atoms.len() == 1 && self.cells.is_empty()).then(|| self.atoms[0])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if let Some(x) = self.deterministic() {
            return x;
        }
        let u: f64 = rng.random::<f64>() * self.cum[self.cum.len() - 1];
        let k = self.cum.partition_point(|&c| c <= u).min(self.cum.len() - 1);
        if k < self.atoms.len() {
            return self.atoms[k];
        }
        let (x0, x1, f0, f1) = self.cells[k - self.atoms.len()];
        let v: f64 = rng.random();
        // Inverse CDF of the linear density on the cell.
        let t = if (f1 - f0).abs() < 1e-14 * (f0 + f1) {
            v
        } else {
            v * (f0 + f1) / (f0 + (f0 * f0 + (f1 - f0) * v * (f0 + f1)).sqrt())
        };
        x0 + t * (x1 - x0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn masses_and_integrals() {
        let m = Measure::uniform(-1.0, 1.0, 101);
        assert!((m.total_mass() - 1.0).abs() < 1e-12);
        let mean = m.integrate(|x| Ok(x * x)).unwrap();
        assert!((mean - 1.0 / 3.0).abs() < 1e-3);
        let d = Measure::weighted_atom(1.0, 0.5);
        assert_eq!(d.total_mass(), 0.5);
        assert!(Measure::default().validate().is_err());
    }

    #[test]
    fn sampler_reproduces_linear_density() {
        let m = Measure {
            atoms: vec![],
            density: Some(GridDensity { grid: vec![0.0, 1.0], values: vec![0.0, 2.0] }),
        };
        let s = MeasureSampler::new(&m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| s.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 2.0 / 3.0).abs() < 0.005, "{mean}");
    }
}
