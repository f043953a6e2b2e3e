use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{SimConfig, UserProfile};
use crate::nn::RngStream;
use crate::Result;

const POPULATION_TAG: u64 = 0x504f_5055;

/// Draws the user population. User `i` is generated from its own stream, so
/// the first `n` users are the same regardless of population size.
pub fn build_population(cfg: &SimConfig) -> Result<Vec<UserProfile>> {
    cfg.validate()?;
    Ok((0..cfg.population as u64).map(|id| draw_user(cfg, id)).collect())
}

fn draw_user(cfg: &SimConfig, user_id: u64) -> UserProfile {
    let k = cfg.pages;
    let mut rng = RngStream::new(cfg.seed, user_id).fork(POPULATION_TAG).rng();
    let single = rng.random::<f64>() < cfg.single_page_fraction;
    let (affinity, dominant_page) = if single {
        let dom = rng.random_range(0..k);
        let aff =
            (0..k).map(|j| if j == dom { rng.random_range(0.8..=1.0) } else { rng.random_range(0.0..=0.2) }).collect();
        (aff, Some(dom))
    } else {
        let base: f64 = rng.random_range(0.3..0.7);
        let aff = (0..k).map(|_| base + rng.random_range(0.0..0.25)).collect();
        (aff, None)
    };
    let segment = match dominant_page {
        Some(d) if rng.random::<f64>() < cfg.segment_accuracy => d,
        Some(_) => rng.random_range(0..=k),
        None if rng.random::<f64>() < cfg.segment_accuracy => k,
        None => rng.random_range(0..=k),
    };
    let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
    let base_engagement = cfg.base_engagement * (cfg.engagement_spread * z).exp();
    let activity_signal = base_engagement.ln() + 0.1 * Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
    let volatility = cfg.volatility_scale * rng.random_range(0.5..1.5);
    let trigger_page = rng.random_range(0..k);
    let active_prob = rng.random_range(cfg.min_active_prob..=1.0);
    UserProfile {
        user_id,
        base_engagement,
        affinity,
        volatility,
        trigger_page,
        active_prob,
        segment,
        activity_signal,
        dominant_page,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn deterministic_under_seed() {
        let cfg = SimConfig { population: 200, ..Default::default() };
        assert_eq!(build_population(&cfg).unwrap(), build_population(&cfg).unwrap());
        let other = SimConfig { seed: 2, ..cfg.clone() };
        assert_ne!(build_population(&cfg).unwrap(), build_population(&other).unwrap());
    }

    #[test]
    fn all_dominant_when_fraction_is_one() {
        let cfg = SimConfig { population: 300, single_page_fraction: 1.0, ..Default::default() };
        for u in build_population(&cfg).unwrap() {
            let d = u.dominant_page.unwrap();
            assert!(u.affinity[d] >= 0.8);
            for (j, a) in u.affinity.iter().enumerate() {
                if j != d {
                    assert!(*a <= 0.2);
                }
            }
        }
    }

    #[test]
    fn mixed_users_have_close_affinities() {
        let cfg = SimConfig { population: 300, single_page_fraction: 0.0, ..Default::default() };
        for u in build_population(&cfg).unwrap() {
            let max = u.affinity.iter().copied().fold(0.0, f64::max);
            let min = u.affinity.iter().copied().fold(1.0, f64::min);
            assert!(max - min <= 0.25);
            assert!(u.affinity.iter().all(|a| (0.0..=1.0).contains(a)));
            assert!(u.base_engagement > 0.0);
        }
    }

    #[test]
    fn dominant_fraction_matches_config() {
        let cfg = SimConfig { population: 10_000, ..Default::default() };
        let pop = build_population(&cfg).unwrap();
        let frac = pop.iter().filter(|u| u.dominant_page.is_some()).count() as f64 / pop.len() as f64;
        assert!((frac - 0.58).abs() < 0.01, "{frac}");
    }

    #[test]
    fn empty_population_is_config_error() {
        let cfg = SimConfig { population: 0, ..Default::default() };
        assert!(matches!(build_population(&cfg), Err(Error::Config(_))));
    }
}
