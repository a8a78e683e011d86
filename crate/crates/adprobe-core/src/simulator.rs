//! A configurable blackbox ad-ecosystem simulator.
//!
//! Ads are drawn per reload from a weighted pool; history-triggered effects
//! rescale weights per agent (a multiplier of 0 disables an ad, large
//! multipliers model remarketing), and settings rules decide which
//! interests the transparency page lists. An opacity scenario is a config
//! where some effect fires but no settings rule does.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::AdRecord;
use crate::rng::{self, streams};
use crate::sut::{AgentId, Sut, SutAction, SutError};

/// One ad that the ecosystem can serve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdSpec {
    pub title: String,
    pub url: String,
    pub text: String,
    pub base_weight: f64,
}

/// Predicate over an agent's applied action history.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerPattern {
    /// Any visited URL contains the substring.
    VisitedUrlContaining { substring: String },
    /// Some `set` action set `key` to `value`.
    SettingEquals { key: String, value: String },
    /// Some remove-interest action used this keyword.
    RemovedInterest { keyword: String },
    /// The agent opted out.
    OptedOut,
    /// Negation, e.g. "did not visit ..." to make an ad group-exclusive.
    Not { inner: Box<TriggerPattern> },
}

impl TriggerPattern {
    pub fn matches(&self, history: &[SutAction]) -> bool {
        match self {
            TriggerPattern::VisitedUrlContaining { substring } => {
                history.iter().any(|a| match a {
                    SutAction::Visit { urls } => urls.iter().any(|u| u.contains(substring)),
                    _ => false,
                })
            }
            TriggerPattern::SettingEquals { key, value } => history.iter().any(|a| {
                matches!(a, SutAction::Set { key: k, value: v } if k == key && v == value)
            }),
            TriggerPattern::RemovedInterest { keyword } => history
                .iter()
                .any(|a| matches!(a, SutAction::RemoveInterest { keyword: k } if k == keyword)),
            TriggerPattern::OptedOut => history.iter().any(|a| matches!(a, SutAction::OptOut)),
            TriggerPattern::Not { inner } => !inner.matches(history),
        }
    }
}

/// Rescales one pool ad for agents whose history matches the trigger.
/// A multiplier of 0 disables the ad for them; 1 is a no-op.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Effect {
    pub trigger: TriggerPattern,
    pub ad_index: usize,
    pub weight_multiplier: f64,
}

/// Lists `interest` on the settings page of agents matching the trigger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingsRule {
    pub trigger: TriggerPattern,
    pub interest: String,
}

pub const DEFAULT_SLOTS_PER_RELOAD: u32 = 5;

fn default_slots() -> u32 {
    DEFAULT_SLOTS_PER_RELOAD
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub ad_pool: Vec<AdSpec>,
    #[serde(default)]
    pub effects: Vec<Effect>,
    #[serde(default)]
    pub settings_rules: Vec<SettingsRule>,
    #[serde(default = "default_slots")]
    pub slots_per_reload: u32,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("ad pool ({pool}) smaller than slots_per_reload ({slots})")]
    PoolTooSmall { pool: usize, slots: u32 },
    #[error("ad {index} has non-positive or non-finite base weight {weight}")]
    BadWeight { index: usize, weight: f64 },
    #[error("effect {index} references ad {ad_index}, pool has {pool}")]
    EffectOutOfRange {
        index: usize,
        ad_index: usize,
        pool: usize,
    },
    #[error("effect {index} has invalid multiplier {multiplier}")]
    BadMultiplier { index: usize, multiplier: f64 },
    #[error("slots_per_reload must be positive")]
    ZeroSlots,
    #[error("could not read simulator config: {0}")]
    Io(#[from] std::io::Error),
    #[error("could not parse simulator config: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.slots_per_reload == 0 {
            return Err(SimulatorError::ZeroSlots);
        }
        if self.ad_pool.len() < self.slots_per_reload as usize {
            return Err(SimulatorError::PoolTooSmall {
                pool: self.ad_pool.len(),
                slots: self.slots_per_reload,
            });
        }
        for (index, ad) in self.ad_pool.iter().enumerate() {
            if !(ad.base_weight.is_finite() && ad.base_weight > 0.0) {
                return Err(SimulatorError::BadWeight {
                    index,
                    weight: ad.base_weight,
                });
            }
        }
        for (index, effect) in self.effects.iter().enumerate() {
            if effect.ad_index >= self.ad_pool.len() {
                return Err(SimulatorError::EffectOutOfRange {
                    index,
                    ad_index: effect.ad_index,
                    pool: self.ad_pool.len(),
                });
            }
            if !(effect.weight_multiplier.is_finite() && effect.weight_multiplier >= 0.0) {
                return Err(SimulatorError::BadMultiplier {
                    index,
                    multiplier: effect.weight_multiplier,
                });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<SimulatorConfig, SimulatorError> {
        let config: SimulatorConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<SimulatorConfig, SimulatorError> {
        SimulatorConfig::from_json(&std::fs::read_to_string(path)?)
    }

    /// A small generic ecosystem used by the CLI when no config is given:
    /// visiting job pages boosts a recruiting ad, and a gym interest rule
    /// demonstrates the settings page.
    pub fn demo() -> SimulatorConfig {
        let ad = |title: &str, url: &str, text: &str, base_weight: f64| AdSpec {
            title: title.into(),
            url: url.into(),
            text: text.into(),
            base_weight,
        };
        SimulatorConfig {
            ad_pool: vec![
                ad("Find Staff Engineers", "hire.example.com", "Recruiting made simple", 1.0),
                ad("Cheap Flights Tonight", "fly.example.net", "Compare 400 airlines", 1.0),
                ad("Best Dividend Funds", "invest.example.org", "Long term yield", 1.0),
                ad("Standing Desks Sale", "desk.example.io", "Ergonomic offers", 1.0),
                ad("Learn Woodworking", "craft.example.dev", "Weekend classes", 1.0),
                ad("Daily Gym Deals", "gym.example.com", "Memberships near you", 1.0),
            ],
            effects: vec![Effect {
                trigger: TriggerPattern::VisitedUrlContaining { substring: "jobs".into() },
                ad_index: 0,
                weight_multiplier: 25.0,
            }],
            settings_rules: vec![SettingsRule {
                trigger: TriggerPattern::VisitedUrlContaining { substring: "gym".into() },
                interest: "Fitness".into(),
            }],
            slots_per_reload: 5,
            seed: 1,
        }
    }
}

/// Serve `reloads` pages for an agent with the given action history. Every
/// reload samples `slots_per_reload` distinct ads without replacement,
/// proportionally to effective weights (base times the multipliers of every
/// matching effect). Deterministic for a given RNG stream.
pub fn serve(
    config: &SimulatorConfig,
    agent_history: &[SutAction],
    reloads: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<AdRecord> {
    let mut weights: Vec<f64> = config.ad_pool.iter().map(|a| a.base_weight).collect();
    for effect in &config.effects {
        if effect.trigger.matches(agent_history) {
            weights[effect.ad_index] *= effect.weight_multiplier;
        }
    }

    let mut ads = Vec::new();
    let mut remaining: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    for reload in 0..reloads {
        remaining.clear();
        remaining.extend(
            weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, &w)| (i, w)),
        );
        for slot in 0..config.slots_per_reload {
            let total: f64 = remaining.iter().map(|(_, w)| w).sum();
            if remaining.is_empty() || total <= 0.0 {
                break; // fewer positive-weight ads than slots for this agent
            }
            let mut draw = rng.random::<f64>() * total;
            let mut chosen = remaining.len() - 1;
            for (pos, (_, w)) in remaining.iter().enumerate() {
                if draw < *w {
                    chosen = pos;
                    break;
                }
                draw -= w;
            }
            let (ad_index, _) = remaining.swap_remove(chosen);
            let spec = &config.ad_pool[ad_index];
            ads.push(AdRecord {
                title: spec.title.clone(),
                url: spec.url.clone(),
                text: spec.text.clone(),
                reload,
                slot,
            });
        }
    }
    ads
}

/// Interests listed on the agent's settings page: the union of interests
/// whose rule matches the history, minus interests matching any removal the
/// agent performed (removal keywords match interest names
/// case-insensitively).
pub fn settings_for(config: &SimulatorConfig, agent_history: &[SutAction]) -> BTreeSet<String> {
    let mut interests: BTreeSet<String> = config
        .settings_rules
        .iter()
        .filter(|rule| rule.trigger.matches(agent_history))
        .map(|rule| rule.interest.clone())
        .collect();
    for action in agent_history {
        if let SutAction::RemoveInterest { keyword } = action {
            let keyword = keyword.to_lowercase();
            interests.retain(|i| !i.to_lowercase().contains(&keyword));
        }
    }
    interests
}

/// Stateful in-process SUT wrapping a config: records per-agent histories
/// and serves from a per-agent RNG stream, so call interleaving across
/// agents cannot change any agent's ads.
pub struct Simulator {
    config: SimulatorConfig,
    histories: HashMap<AgentId, Vec<SutAction>>,
}

impl Simulator {
    pub fn new(config: SimulatorConfig) -> Result<Simulator, SimulatorError> {
        config.validate()?;
        Ok(Simulator {
            config,
            histories: HashMap::new(),
        })
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    fn history(&self, agent: AgentId) -> &[SutAction] {
        self.histories.get(&agent).map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Sut for Simulator {
    fn apply(&mut self, agent: AgentId, action: &SutAction) -> Result<(), SutError> {
        self.histories.entry(agent).or_default().push(action.clone());
        Ok(())
    }

    fn collect(&mut self, agent: AgentId, reloads: u32) -> Result<Vec<AdRecord>, SutError> {
        let mut rng = rng::stream(self.config.seed, streams::SERVE + agent);
        Ok(serve(&self.config, self.history(agent), reloads, &mut rng))
    }

    fn settings(&mut self, agent: AgentId) -> Result<Vec<String>, SutError> {
        Ok(settings_for(&self.config, self.history(agent)).into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> Vec<AdSpec> {
        (0..n)
            .map(|i| AdSpec {
                title: format!("Ad {i}"),
                url: format!("ad{i}.example.com"),
                text: String::new(),
                base_weight: 1.0,
            })
            .collect()
    }

    fn config(n: usize, slots: u32) -> SimulatorConfig {
        SimulatorConfig {
            ad_pool: pool(n),
            effects: vec![],
            settings_rules: vec![],
            slots_per_reload: slots,
            seed: 7,
        }
    }

    #[test]
    fn full_pool_single_reload_is_exhaustive() {
        let cfg = config(5, 5);
        let mut rng = rng::stream(0, 0);
        let ads = serve(&cfg, &[], 1, &mut rng);
        assert_eq!(ads.len(), 5);
        let urls: BTreeSet<&str> = ads.iter().map(|a| a.url.as_str()).collect();
        assert_eq!(urls.len(), 5, "sampling without replacement covers the pool");
        assert!(ads.iter().enumerate().all(|(i, a)| a.slot == i as u32 && a.reload == 0));
    }

    #[test]
    fn zero_multiplier_never_serves_to_triggered_agents() {
        let mut cfg = config(6, 3);
        cfg.effects.push(Effect {
            trigger: TriggerPattern::OptedOut,
            ad_index: 2,
            weight_multiplier: 0.0,
        });
        let history = [SutAction::OptOut];
        let mut rng = rng::stream(1, 0);
        let ads = serve(&cfg, &history, 10_000, &mut rng);
        assert!(ads.iter().all(|a| a.url != "ad2.example.com"));
        // Untriggered agents still see it.
        let mut rng = rng::stream(1, 1);
        let ads = serve(&cfg, &[], 200, &mut rng);
        assert!(ads.iter().any(|a| a.url == "ad2.example.com"));
    }

    #[test]
    fn weighted_sampling_tracks_weights() {
        // Two ads with weights (1, 3), one slot: second ad ~75% of draws.
        let mut cfg = config(2, 1);
        cfg.ad_pool[1].base_weight = 3.0;
        let mut rng = rng::stream(5, 0);
        let reloads = 100_000;
        let ads = serve(&cfg, &[], reloads, &mut rng);
        let heavy = ads.iter().filter(|a| a.url == "ad1.example.com").count();
        let fraction = heavy as f64 / reloads as f64;
        assert!((fraction - 0.75).abs() < 0.01, "fraction {fraction}");
    }

    #[test]
    fn serve_is_deterministic_per_stream() {
        let cfg = config(8, 4);
        let mut a = rng::stream(3, 9);
        let mut b = rng::stream(3, 9);
        assert_eq!(serve(&cfg, &[], 5, &mut a), serve(&cfg, &[], 5, &mut b));
    }

    #[test]
    fn settings_rules_union_and_removal() {
        let mut cfg = config(5, 5);
        cfg.settings_rules = vec![
            SettingsRule {
                trigger: TriggerPattern::VisitedUrlContaining { substring: "dating".into() },
                interest: "Dating & Personals".into(),
            },
            SettingsRule {
                trigger: TriggerPattern::VisitedUrlContaining { substring: "gym".into() },
                interest: "Fitness".into(),
            },
        ];
        assert!(settings_for(&cfg, &[]).is_empty());

        let visited = [SutAction::Visit { urls: vec!["http://dating.example.com".into()] }];
        let listed = settings_for(&cfg, &visited);
        assert_eq!(listed.into_iter().collect::<Vec<_>>(), vec!["Dating & Personals"]);

        let removed = [
            SutAction::Visit { urls: vec!["http://dating.example.com".into()] },
            SutAction::RemoveInterest { keyword: "dating".into() },
        ];
        assert!(settings_for(&cfg, &removed).is_empty(), "removal clears the interest");
    }

    #[test]
    fn opacity_config_changes_ads_but_not_settings() {
        let mut cfg = config(6, 3);
        cfg.effects.push(Effect {
            trigger: TriggerPattern::VisitedUrlContaining { substring: "rehab".into() },
            ad_index: 0,
            weight_multiplier: 40.0,
        });
        // No settings rules at all: the transparency page stays empty.
        let history = [SutAction::Visit { urls: vec!["http://rehab.example.com".into()] }];
        assert!(settings_for(&cfg, &history).is_empty());
        let mut rng = rng::stream(2, 0);
        let boosted = serve(&cfg, &history, 2000, &mut rng)
            .iter()
            .filter(|a| a.url == "ad0.example.com")
            .count();
        let mut rng = rng::stream(2, 1);
        let baseline = serve(&cfg, &[], 2000, &mut rng)
            .iter()
            .filter(|a| a.url == "ad0.example.com")
            .count();
        assert!(boosted > baseline * 2, "boosted {boosted} vs baseline {baseline}");
    }

    #[test]
    fn not_pattern_inverts() {
        let p = TriggerPattern::Not {
            inner: Box::new(TriggerPattern::OptedOut),
        };
        assert!(p.matches(&[]));
        assert!(!p.matches(&[SutAction::OptOut]));
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = config(3, 5);
        assert!(matches!(cfg.validate(), Err(SimulatorError::PoolTooSmall { .. })));
        cfg = config(5, 5);
        cfg.ad_pool[0].base_weight = 0.0;
        assert!(matches!(cfg.validate(), Err(SimulatorError::BadWeight { index: 0, .. })));
        cfg = config(5, 5);
        cfg.effects.push(Effect {
            trigger: TriggerPattern::OptedOut,
            ad_index: 9,
            weight_multiplier: 1.0,
        });
        assert!(matches!(cfg.validate(), Err(SimulatorError::EffectOutOfRange { .. })));
    }

    #[test]
    fn simulator_as_sut_keeps_agent_streams_independent() {
        let mut sim = Simulator::new(config(6, 3)).unwrap();
        sim.apply(0, &SutAction::Idle).unwrap();
        let first = sim.collect(0, 4).unwrap();

        // Interleave another agent; agent 0's ads must not change.
        let mut sim2 = Simulator::new(config(6, 3)).unwrap();
        sim2.apply(1, &SutAction::Idle).unwrap();
        sim2.apply(0, &SutAction::Idle).unwrap();
        let _ = sim2.collect(1, 4).unwrap();
        let second = sim2.collect(0, 4).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn demo_config_is_valid() {
        SimulatorConfig::demo().validate().unwrap();
        let json = serde_json::to_string_pretty(&SimulatorConfig::demo()).unwrap();
        SimulatorConfig::from_json(&json).unwrap();
    }
}
