use std::collections::{BTreeMap, BTreeSet};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_rng, WorldGT, WorldObject};
use crate::semantics::normalize_label;
use crate::supervision::{
    render_class_label_gen_response, render_landmark_eval_response, CompositeSpec, EvalFeedback, GenFeedback, Oracle,
    OverlayEntry, SupervisionError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedOracleConfig {
    pub match_radius: f64,
    /// Probability that any single verdict is dropped or randomized.
    pub error_rate: f64,
    pub seed: u64,
}

impl Default for ScriptedOracleConfig {
    fn default() -> Self {
        Self { match_radius: 0.25, error_rate: 0.0, seed: 0 }
    }
}

/// Ground-truth referee answering both evaluator roles from the world
/// state at the composite's frame.
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    world: WorldGT,
    cfg: ScriptedOracleConfig,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Verdicts {
    pub eval: EvalFeedback,
    pub gen: GenFeedback,
}

fn label_matches(o: &OverlayEntry, obj: &WorldObject) -> bool {
    let truth = [normalize_label(&obj.category), normalize_label(&obj.descriptive)];
    let labels = if o.labels.is_empty() { std::slice::from_ref(&o.label) } else { &o.labels[..] };
    labels.iter().any(|l| truth.contains(&normalize_label(l)))
}

fn has_descriptive(o: &OverlayEntry, obj: &WorldObject) -> bool {
    let d = normalize_label(&obj.descriptive);
    o.labels.iter().chain(std::iter::once(&o.label)).any(|l| normalize_label(l) == d)
}

impl ScriptedOracle {
    pub fn new(world: WorldGT, cfg: ScriptedOracleConfig) -> Self {
        Self { world, cfg }
    }

    fn nearest<'w>(&'w self, o: &OverlayEntry, frame: u64) -> Option<(&'w WorldObject, f64)> {
        self.world
            .active_at(frame)
            .map(|obj| (obj, (obj.position - o.position).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)))
    }

    /// Error-free verdicts for a composite.
    pub fn truth(&self, spec: &CompositeSpec) -> Verdicts {
        let mut v = Verdicts::default();
        let mut correct: BTreeMap<u32, Vec<&OverlayEntry>> = BTreeMap::new();
        let mut objects = BTreeMap::new();
        for o in &spec.overlays {
            match self.nearest(o, spec.frame_id) {
                Some((obj, d)) if d <= self.cfg.match_radius => {
                    if label_matches(o, obj) {
                        correct.entry(obj.id).or_default().push(o);
                        objects.insert(obj.id, obj);
                    } else {
                        v.eval.incorrect.push(o.number);
                        v.eval.corrected.push(obj.category.clone());
                    }
                }
                _ => v.eval.empty.push(o.number),
            }
        }
        for (id, members) in &correct {
            let obj = objects[id];
            let precise = if members.len() > 1 {
                let p = members.iter().find(|o| has_descriptive(o, obj)).unwrap_or(&members[0]).number;
                v.eval.duplicated.push(members.iter().map(|o| o.number).collect());
                v.eval.precise_in_duplicated.push(p);
                p
            } else {
                members[0].number
            };
            v.gen.labels.insert(precise, vec![obj.descriptive.clone()]);
        }
        v
    }

    fn corrupt(&self, v: Verdicts, spec: &CompositeSpec) -> Verdicts {
        if self.cfg.error_rate <= 0.0 || spec.overlays.is_empty() {
            return v;
        }
        let mut rng: ChaCha8Rng = frame_rng(self.cfg.seed, spec.frame_id);
        let numbers: Vec<u32> = spec.overlays.iter().map(|o| o.number).collect();
        let vocab = self.world.categories();
        let rate = self.cfg.error_rate;
        // each verdict: keep, drop, or replace with a random one
        let fate = |rng: &mut ChaCha8Rng| -> Option<bool> {
            if rng.random::<f64>() >= rate {
                Some(false)
            } else if rng.random_bool(0.5) {
                None
            } else {
                Some(true)
            }
        };
        let mut out = Verdicts::default();
        for n in v.eval.empty {
            match fate(&mut rng) {
                Some(false) => out.eval.empty.push(n),
                Some(true) => out.eval.empty.push(numbers[rng.random_range(0..numbers.len())]),
                None => {}
            }
        }
        for (n, c) in v.eval.incorrect.into_iter().zip(v.eval.corrected) {
            match fate(&mut rng) {
                Some(false) => {
                    out.eval.incorrect.push(n);
                    out.eval.corrected.push(c);
                }
                Some(true) => {
                    out.eval.incorrect.push(n);
                    out.eval.corrected.push(vocab[rng.random_range(0..vocab.len())].clone());
                }
                None => {}
            }
        }
        for (g, p) in v.eval.duplicated.into_iter().zip(v.eval.precise_in_duplicated) {
            match fate(&mut rng) {
                Some(false) => {
                    out.eval.duplicated.push(g);
                    out.eval.precise_in_duplicated.push(p);
                }
                Some(true) => {
                    let q = g[rng.random_range(0..g.len())];
                    out.eval.duplicated.push(g);
                    out.eval.precise_in_duplicated.push(q);
                }
                None => {}
            }
        }
        let descriptive: Vec<String> = self.world.objects.iter().map(|o| o.descriptive.clone()).collect();
        for (n, labels) in v.gen.labels {
            match fate(&mut rng) {
                Some(false) => {
                    out.gen.labels.insert(n, labels);
                }
                Some(true) => {
                    out.gen.labels.insert(n, vec![descriptive[rng.random_range(0..descriptive.len())].clone()]);
                }
                None => {}
            }
        }
        // a randomized number may collide with another list; keep the first
        let mut seen = BTreeSet::new();
        out.eval.empty.retain(|n| seen.insert(*n));
        out
    }

    pub fn verdicts(&self, spec: &CompositeSpec) -> Verdicts {
        self.corrupt(self.truth(spec), spec)
    }
}

impl Oracle for ScriptedOracle {
    fn landmark_eval(&mut self, spec: &CompositeSpec, _prompt: &str) -> Result<String, SupervisionError> {
        Ok(render_landmark_eval_response(&self.verdicts(spec).eval))
    }

    fn class_label_gen(&mut self, spec: &CompositeSpec, _prompt: &str) -> Result<String, SupervisionError> {
        Ok(render_class_label_gen_response(&self.verdicts(spec).gen))
    }
}
