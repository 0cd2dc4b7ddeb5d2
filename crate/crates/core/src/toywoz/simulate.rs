use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::realize::{realize_response, user_utterance, UserIntent};
use super::{
    canonical_act, category, ActToken, ActType, BeliefState, DbBucket, DomainBelief, DomainGoal, EnvError, Goal, Schema,
    Turn, TurnCategory, GENERAL, NO_SLOT,
};

const MAX_GOAL_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalConfig {
    pub max_domains: usize,
    pub p_two_domains: f64,
    pub max_constraints: usize,
    pub max_requests: usize,
    pub p_book: f64,
}

impl Default for GoalConfig {
    fn default() -> Self {
        Self { max_domains: 2, p_two_domains: 0.4, max_constraints: 3, max_requests: 2, p_book: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedRewards {
    pub transaction: f64,
    pub info: f64,
    pub nicety: f64,
}

impl Default for PlantedRewards {
    fn default() -> Self {
        Self { transaction: 1.0, info: 0.5, nicety: 0.05 }
    }
}

impl PlantedRewards {
    pub fn of(&self, c: TurnCategory) -> f64 {
        match c {
            TurnCategory::Transaction => self.transaction,
            TurnCategory::Info => self.info,
            TurnCategory::Nicety => self.nicety,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertProfile {
    pub p_nicety: f64,
    pub p_redundant: f64,
    pub max_turns: usize,
    pub rewards: PlantedRewards,
}

impl Default for ExpertProfile {
    fn default() -> Self {
        Self { p_nicety: 0.3, p_redundant: 0.15, max_turns: 13, rewards: PlantedRewards::default() }
    }
}

/// Draws a goal whose constraints are met by at least one database entity.
pub fn sample_goal<R: Rng>(schema: &Schema, cfg: &GoalConfig, rng: &mut R) -> Result<Goal, EnvError> {
    let two = cfg.max_domains >= 2 && schema.domains.len() >= 2 && rng.random_bool(cfg.p_two_domains);
    let n = if two { 2 } else { 1 };
    let picked: Vec<_> = schema.domains.choose_multiple(rng, n).collect();
    let mut domains = Vec::with_capacity(n);
    for d in picked {
        let max_c = cfg.max_constraints.clamp(1, d.informable.len());
        let mut constraints = None;
        for _ in 0..MAX_GOAL_DRAWS {
            let k = rng.random_range(1..=max_c);
            let cons: BTreeMap<String, String> = d
                .informable
                .choose_multiple(rng, k)
                .map(|s| (s.name.clone(), s.values.choose(rng).expect("non-empty values").clone()))
                .collect();
            if d.count_matches(&cons) > 0 {
                constraints = Some(cons);
                break;
            }
        }
        let constraints = constraints.ok_or(EnvError::OverConstrained(MAX_GOAL_DRAWS))?;
        let askable: Vec<&String> = d.requestable.iter().filter(|s| *s != "ref").collect();
        let k = rng.random_range(0..=cfg.max_requests.min(askable.len()));
        let chosen: Vec<&&String> = askable.choose_multiple(rng, k).collect();
        let mut requests: Vec<String> =
            d.requestable.iter().filter(|s| chosen.iter().any(|c| **c == *s)).cloned().collect();
        let book = d.bookable && rng.random_bool(cfg.p_book);
        if book {
            requests.push("ref".into());
        }
        domains.push(DomainGoal { domain: d.name.clone(), constraints, requests, book });
    }
    Ok(Goal { domains })
}

fn partition<R: Rng, T: Clone>(items: &[T], parts: usize, rng: &mut R) -> Vec<Vec<T>> {
    let mut cuts: Vec<usize> = (1..items.len()).collect::<Vec<_>>().choose_multiple(rng, parts - 1).copied().collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for c in cuts.into_iter().chain([items.len()]) {
        out.push(items[start..c].to_vec());
        start = c;
    }
    out
}

#[derive(Debug, Clone)]
enum After {
    Request(Vec<String>),
    Book,
}

#[derive(Debug)]
struct DomainPlan {
    chunks: Vec<Vec<String>>,
    after: Vec<After>,
    thanks: bool,
}

impl DomainPlan {
    fn len(&self) -> usize {
        self.chunks.len() + self.after.len() + usize::from(self.thanks)
    }

    fn merge_requests(&mut self) -> bool {
        let idx: Vec<usize> =
            self.after.iter().enumerate().filter(|(_, a)| matches!(a, After::Request(_))).map(|(i, _)| i).collect();
        if idx.len() < 2 {
            return false;
        }
        let After::Request(tail) = self.after.remove(idx[1]) else { unreachable!() };
        if let After::Request(head) = &mut self.after[idx[0]] {
            head.extend(tail);
        }
        true
    }

    fn merge_chunks(&mut self) -> bool {
        if self.chunks.len() < 2 {
            return false;
        }
        let last = self.chunks.pop().expect("len >= 2");
        self.chunks.last_mut().expect("len >= 1").extend(last);
        true
    }
}

fn plan<R: Rng>(schema: &Schema, goal: &Goal, profile: &ExpertProfile, rng: &mut R) -> Vec<DomainPlan> {
    let mut plans: Vec<DomainPlan> = goal
        .domains
        .iter()
        .map(|g| {
            let d = schema.domain(&g.domain).expect("goal domain in schema");
            let mut order: Vec<String> = g.constraints.keys().cloned().collect();
            order.shuffle(rng);
            let n_chunks = rng.random_range(1..=order.len().max(1));
            let chunks = partition(&order, n_chunks, rng);
            let mut asks: Vec<String> = g.requests.iter().filter(|s| *s != "ref").cloned().collect();
            asks.sort_by_key(|s| d.requestable.iter().position(|r| r == s));
            let mut after: Vec<After> = if asks.is_empty() {
                Vec::new()
            } else {
                let parts = rng.random_range(1..=asks.len());
                partition(&asks, parts, rng).into_iter().map(After::Request).collect()
            };
            if g.book {
                after.push(After::Book);
            }
            after.shuffle(rng);
            DomainPlan { chunks, after, thanks: false }
        })
        .collect();
    let total = |p: &[DomainPlan]| 2 + p.iter().map(DomainPlan::len).sum::<usize>();
    while total(&plans) > profile.max_turns {
        if !plans.iter_mut().any(DomainPlan::merge_requests) && !plans.iter_mut().any(DomainPlan::merge_chunks) {
            break;
        }
    }
    for i in 0..plans.len() {
        if total(&plans) < profile.max_turns && rng.random_bool(profile.p_nicety) {
            plans[i].thanks = true;
        }
    }
    plans
}

/// Runs the scripted expert on `goal`.
///
/// Constraint chunks are revealed in random order. Until the last chunk the
/// agent requests every informable slot of the domain still missing from the
/// belief; the last chunk asks for a recommendation and the agent names the
/// first matching entity, offering a booking when the goal needs one. Requests
/// and booking follow in random order. Noise: redundant re-informs on
/// constraint turns and optional thank-you exchanges.
pub fn simulate_dialogue<R: Rng>(schema: &Schema, goal: &Goal, profile: &ExpertProfile, rng: &mut R) -> Vec<Turn> {
    let plans = plan(schema, goal, profile, rng);
    let mut turns = Vec::new();
    let mut belief = BeliefState::default();
    let mut emit = |belief: &BeliefState, intent: UserIntent, act: Vec<ActToken>, rng: &mut R| {
        let act = canonical_act(act);
        let user_tokens = user_utterance(&intent, rng);
        let resp_tokens = realize_response(&act, rng);
        let planted_reward = profile.rewards.of(category(&act));
        turns.push(Turn {
            belief: belief.clone(),
            user_tokens,
            act_tokens: act,
            resp_tokens,
            planted_reward,
            learned_reward: None,
        });
    };
    emit(&belief, UserIntent::Greet, vec![ActToken::new(ActType::Nicety, GENERAL, NO_SLOT)], rng);
    for (g, p) in goal.domains.iter().zip(&plans) {
        let d = schema.domain(&g.domain).expect("goal domain in schema");
        for (ci, chunk) in p.chunks.iter().enumerate() {
            let last = ci + 1 == p.chunks.len();
            let entry = belief
                .domains
                .entry(g.domain.clone())
                .or_insert_with(|| DomainBelief { constraints: BTreeMap::new(), bucket: DbBucket::Many });
            for s in chunk {
                entry.constraints.insert(s.clone(), g.constraints[s].clone());
            }
            entry.bucket = DbBucket::from_count(d.count_matches(&entry.constraints));
            let mut act = Vec::new();
            if last {
                act.push(ActToken::new(ActType::Inform, &d.name, "name"));
                if g.book {
                    act.push(ActToken::new(ActType::OfferBook, &d.name, NO_SLOT));
                }
            } else {
                for s in d.informable.iter().filter(|s| !entry.constraints.contains_key(&s.name)) {
                    act.push(ActToken::new(ActType::Request, &d.name, &s.name));
                }
            }
            if rng.random_bool(profile.p_redundant) {
                let s = chunk.choose(rng).expect("non-empty chunk");
                act.push(ActToken::new(ActType::Inform, &d.name, s));
            }
            let intent = UserIntent::Constraints {
                domain: g.domain.clone(),
                slots: chunk.clone(),
                first: ci == 0,
                last,
                book: g.book,
            };
            emit(&belief, intent, act, rng);
        }
        for a in &p.after {
            match a {
                After::Request(slots) => {
                    let act = slots.iter().map(|s| ActToken::new(ActType::Inform, &d.name, s)).collect();
                    emit(&belief, UserIntent::Request { domain: g.domain.clone(), slots: slots.clone() }, act, rng);
                }
                After::Book => {
                    let act = vec![ActToken::new(ActType::BookConfirm, &d.name, "ref")];
                    emit(&belief, UserIntent::Book { domain: g.domain.clone() }, act, rng);
                }
            }
        }
        if p.thanks {
            emit(&belief, UserIntent::Thanks, vec![ActToken::new(ActType::Nicety, GENERAL, NO_SLOT)], rng);
        }
    }
    emit(&belief, UserIntent::Bye, vec![ActToken::new(ActType::Goodbye, GENERAL, NO_SLOT)], rng);
    turns
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toywoz::{evaluate_acts, DomainSchema, Entity, Slot};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet() -> ExpertProfile {
        ExpertProfile { p_nicety: 0.0, p_redundant: 0.0, ..ExpertProfile::default() }
    }

    #[test]
    fn goal_sampling_is_deterministic() {
        let s = Schema::standard().restrict(&["hotel".into()]).unwrap();
        let a = sample_goal(&s, &GoalConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_goal(&s, &GoalConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_entity_database_always_matches() {
        let values: BTreeMap<String, String> = [("color", "red"), ("size", "big")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let d = DomainSchema {
            name: "shop".into(),
            informable: vec![
                Slot { name: "color".into(), values: vec!["red".into(), "blue".into()] },
                Slot { name: "size".into(), values: vec!["big".into(), "small".into()] },
            ],
            requestable: vec!["phone".into()],
            bookable: false,
            entities: vec![Entity { name: "shop_0".into(), values: values.clone() }],
        };
        let s = Schema::new(vec![d]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let g = sample_goal(&s, &GoalConfig::default(), &mut rng).unwrap();
            for (k, v) in &g.domains[0].constraints {
                assert_eq!(values[k], *v);
            }
        }
    }

    #[test]
    fn impossible_schema_is_over_constrained() {
        let d = DomainSchema {
            name: "void".into(),
            informable: vec![Slot { name: "color".into(), values: vec!["red".into()] }],
            requestable: vec![],
            bookable: false,
            entities: vec![],
        };
        let s = Schema::new(vec![d]).unwrap();
        let err = sample_goal(&s, &GoalConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, EnvError::OverConstrained(100)));
    }

    #[test]
    fn booking_frequency_follows_config() {
        let s = Schema::standard().restrict(&["restaurant".into()]).unwrap();
        let cfg = GoalConfig { p_book: 0.3, ..GoalConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = (0..1000).filter(|_| sample_goal(&s, &cfg, &mut rng).unwrap().domains[0].book).count();
        assert!((n as f64 / 1000.0 - 0.3).abs() < 0.05, "{n}");
    }

    #[test]
    fn noise_off_is_minimal() {
        let s = Schema::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let g = sample_goal(&s, &GoalConfig::default(), &mut rng).unwrap();
            let turns = simulate_dialogue(&s, &g, &quiet(), &mut rng);
            assert_eq!(turns[0].act_tokens, [ActToken::new(ActType::Nicety, GENERAL, NO_SLOT)]);
            assert_eq!(turns.last().unwrap().act_tokens, [ActToken::new(ActType::Goodbye, GENERAL, NO_SLOT)]);
            let niceties = turns.iter().filter(|t| t.act_tokens[0].kind() == ActType::Nicety).count();
            assert_eq!(niceties, 1);
            let offers = turns.iter().filter(|t| t.act_tokens.iter().any(|a| a.slot() == "name")).count();
            assert_eq!(offers, g.domains.len());
            let confirms =
                turns.iter().filter(|t| t.act_tokens.iter().any(|a| a.kind() == ActType::BookConfirm)).count();
            assert_eq!(confirms, g.domains.iter().filter(|d| d.book).count());
            for t in &turns {
                let redundant = t
                    .act_tokens
                    .iter()
                    .any(|a| a.kind() == ActType::Inform && s.domain(a.domain()).unwrap().slot(a.slot()).is_some());
                assert!(!redundant);
            }
            let o = evaluate_acts(&s, &g, turns.iter().map(|t| (&t.belief, t.act_tokens.as_slice())));
            assert!(o.entity_offered);
            assert_eq!(o.answered, g.requested());
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let s = Schema::standard();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let g = sample_goal(&s, &GoalConfig::default(), &mut rng).unwrap();
            simulate_dialogue(&s, &g, &ExpertProfile::default(), &mut rng)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn length_and_monotone_belief() {
        let s = Schema::standard();
        let p = ExpertProfile::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let g = sample_goal(&s, &GoalConfig::default(), &mut rng).unwrap();
            let turns = simulate_dialogue(&s, &g, &p, &mut rng);
            assert!(turns.len() <= p.max_turns);
            for w in turns.windows(2) {
                assert!(w[0].belief.is_contained_in(&w[1].belief));
            }
            for t in &turns {
                for (d, b) in &t.belief.domains {
                    let n = s.domain(d).unwrap().count_matches(&b.constraints);
                    assert_eq!(b.bucket, DbBucket::from_count(n));
                }
            }
        }
    }

    #[test]
    fn nicety_rate_matches_probability() {
        let s = Schema::standard();
        let cfg = GoalConfig { max_domains: 1, ..GoalConfig::default() };
        let p = ExpertProfile { p_nicety: 0.3, ..ExpertProfile::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut extra = 0usize;
        for _ in 0..n {
            let g = sample_goal(&s, &cfg, &mut rng).unwrap();
            let turns = simulate_dialogue(&s, &g, &p, &mut rng);
            // greet is always present; one thank-you opportunity per domain
            extra += turns.iter().filter(|t| t.act_tokens[0].kind() == ActType::Nicety).count() - 1;
        }
        let rate = extra as f64 / n as f64;
        assert!((rate - 0.3).abs() <= 0.3 * 0.05, "{rate}");
    }
}
