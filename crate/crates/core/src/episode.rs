//! Episode sampling for N-way K-shot evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VfdError};
use crate::rng::Rng;
use crate::synth::choose_without_replacement;

/// One N-way K-shot task over dataset items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub n_query: usize,
    /// `(dataset item index, episode-local label)`, class-major.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    /// Episode-local label → dataset (dense) label.
    pub class_map: Vec<usize>,
}

impl Episode {
    /// Checks the structural invariants of an episode.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(VfdError::Degenerate(m));
        if self.class_map.len() != self.way {
            return bad(format!("{} classes for way {}", self.class_map.len(), self.way));
        }
        let mut cm = self.class_map.clone();
        cm.sort_unstable();
        cm.dedup();
        if cm.len() != self.way {
            return bad("repeated class in episode".into());
        }
        for (set, per) in [(&self.support, self.shot), (&self.query, self.n_query)] {
            let mut counts = vec![0; self.way];
            for &(_, l) in set.iter() {
                if l >= self.way {
                    return bad(format!("local label {l} out of range"));
                }
                counts[l] += 1;
            }
            if counts.iter().any(|&c| c != per) {
                return bad(format!("per-class counts {counts:?}, expected {per}"));
            }
        }
        let mut ids: Vec<usize> = self.support.iter().chain(&self.query).map(|p| p.0).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return bad("support and query overlap".into());
        }
        Ok(())
    }
}

/// Uniform class choice without replacement, then uniform item choice
/// without replacement within each chosen class.
///
/// `by_class[c]` lists the dataset indices of dense class `c`.
pub fn sample_episode(by_class: &[Vec<usize>], way: usize, shot: usize, n_query: usize, rng: &mut Rng) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(VfdError::InvalidConfig("way and shot must be positive".into()));
    }
    if way > by_class.len() {
        return Err(VfdError::InvalidConfig(format!(
            "way {way} exceeds the {} available classes",
            by_class.len()
        )));
    }
    let classes = choose_without_replacement(by_class.len(), way, rng);
    let need = shot + n_query;
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * n_query);
    for (local, &c) in classes.iter().enumerate() {
        let items = &by_class[c];
        if items.len() < need {
            return Err(VfdError::InsufficientItems {
                class: c,
                available: items.len(),
                required: need,
            });
        }
        let pick = choose_without_replacement(items.len(), need, rng);
        support.extend(pick[..shot].iter().map(|&k| (items[k], local)));
        query.extend(pick[shot..].iter().map(|&k| (items[k], local)));
    }
    Ok(Episode {
        way,
        shot,
        n_query,
        support,
        query,
        class_map: classes,
    })
}
