use std::path::{Path, PathBuf};

use crate::script::Script;
use crate::{SimError, Trace};

/// A group order whose trace violated an assertion.
#[derive(Debug, Clone)]
pub struct Failure {
    /// Step order of each group.
    pub orders: Vec<Vec<usize>>,
    pub violations: Vec<String>,
    /// The failing order as a plain script that replays it.
    pub replay: Script,
    pub trace: Trace,
}

impl Failure {
    /// Writes the replay script into `dir` and returns its path.
    pub fn write_replay(&self, dir: &Path, index: usize) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let name = if self.replay.name.is_empty() { "script" } else { &self.replay.name };
        let path = dir.join(format!("{name}.replay-{index}.toml"));
        let mut text = String::new();
        for v in &self.violations {
            text.push_str(&format!("# violated: {v}\n"));
        }
        text.push_str(&self.replay.to_toml());
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Exploration {
    pub runs: usize,
    pub failures: Vec<Failure>,
}

impl Exploration {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Every permutation of `0..n`, in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..n).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("a larger element exists");
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.push(cur.clone());
    }
}

/// Runs every order of every unordered group and checks the script's
/// assertions on each trace. Refuses when there are more than `bound`
/// orders.
pub fn explore_interleavings(script: &Script, bound: u128) -> Result<Exploration, SimError> {
    script.check()?;
    let count = script.interleavings();
    if count > bound {
        return Err(SimError::TooManyInterleavings { count, bound });
    }
    let per_group: Vec<Vec<Vec<usize>>> = script.groups.iter().map(|g| permutations(g.steps.len())).collect();
    let mut out = Exploration::default();
    let mut pick = vec![0usize; per_group.len()];
    loop {
        let orders: Vec<Vec<usize>> = pick.iter().zip(&per_group).map(|(&k, ps)| ps[k].clone()).collect();
        let replay = script.linearize(&orders);
        let run = crate::world::World::new(&replay).run();
        out.runs += 1;
        let violations = run.trace.violations(&script.asserts);
        if !violations.is_empty() {
            out.failures.push(Failure {
                orders,
                violations,
                replay,
                trace: run.trace,
            });
        }
        // Odometer over the groups' permutation lists.
        let mut g = 0;
        loop {
            if g == pick.len() {
                return Ok(out);
            }
            pick[g] += 1;
            if pick[g] < per_group[g].len() {
                break;
            }
            pick[g] = 0;
            g += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_exhaustive_and_ordered() {
        assert_eq!(permutations(0), vec![Vec::<usize>::new()]);
        assert_eq!(permutations(1), vec![vec![0]]);
        let p3 = permutations(3);
        assert_eq!(p3.len(), 6);
        assert_eq!(p3[0], [0, 1, 2]);
        assert_eq!(p3[5], [2, 1, 0]);
        assert_eq!(permutations(5).len(), 120);
    }
}
