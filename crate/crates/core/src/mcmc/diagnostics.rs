use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::chain::ChainSet;

/// Minimum recorded draws per chain for a potential scale reduction factor.
pub const MIN_DRAWS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Rhat {
    Value(f64),
    /// The coordinate never moved in any chain.
    NotApplicable,
}

impl Rhat {
    pub fn exceeds(&self, bound: f64) -> bool {
        match self {
            Rhat::Value(v) => !(*v < bound),
            Rhat::NotApplicable => false,
        }
    }
}

/// Gelman-Rubin `R̂ = sqrt(((n-1)/n · W + B/n) / W)` from between-chain (`B`)
/// and within-chain (`W`) variances.
pub fn potential_scale_reduction(chains: &[Vec<f64>]) -> Result<Rhat> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::InvalidConfig(format!(
            "R-hat needs at least 2 chains, got {m}"
        )));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < MIN_DRAWS {
        return Err(Error::InvalidConfig(format!(
            "R-hat needs at least {MIN_DRAWS} draws per chain, got {n}"
        )));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c[..n].iter().sum::<f64>() / nf)
        .collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let between = nf / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let within = chains
        .iter()
        .zip(&means)
        .map(|(c, mean)| c[..n].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    if within == 0.0 {
        return Ok(if between == 0.0 {
            Rhat::NotApplicable
        } else {
            Rhat::Value(f64::INFINITY)
        });
    }
    let pooled = (nf - 1.0) / nf * within + between / nf;
    Ok(Rhat::Value((pooled / within).sqrt()))
}

/// `R̂` for every coordinate whose name passes `select`.
pub fn gelman_rubin<F>(set: &ChainSet, select: F) -> Result<Vec<(String, Rhat)>>
where
    F: Fn(&str) -> bool,
{
    set.names
        .iter()
        .enumerate()
        .filter(|(_, n)| select(n))
        .map(|(i, n)| Ok((n.clone(), potential_scale_reduction(&set.coordinate(i))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_chains_are_flagged() {
        let a: Vec<f64> = (0..100).map(|i| (i % 7) as f64 / 7.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        match potential_scale_reduction(&[a, b]).unwrap() {
            Rhat::Value(v) => assert!(v > 2.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicated_chain_is_at_most_one() {
        let a: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
        match potential_scale_reduction(&[a.clone(), a]).unwrap() {
            Rhat::Value(v) => assert!(v <= 1.0 + 1e-6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_coordinate_is_not_applicable() {
        let r = potential_scale_reduction(&[vec![1.0; 20], vec![1.0; 20]]).unwrap();
        assert_eq!(r, Rhat::NotApplicable);
    }

    #[test]
    fn preconditions() {
        assert!(potential_scale_reduction(&[vec![0.0; 20]]).is_err());
        assert!(potential_scale_reduction(&[vec![0.0; 5], vec![1.0; 5]]).is_err());
    }
}
