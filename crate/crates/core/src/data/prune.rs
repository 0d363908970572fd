//! Two-stage pruning: back-view Janus removal, then identity-consistency ranking.

use serde::{Deserialize, Serialize};

use super::backends::{cosine, BackViewClassifier, Embedder, RandomConvEmbedder, TemplateClassifier};
use super::{is_back_view, IdentityRecord};
use crate::error::{Error, Result};

pub const DEFAULT_TAU_BV: f64 = 0.93;
pub const DEFAULT_TAU_II: f64 = 0.70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedView {
    pub id: u32,
    pub azimuth: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    pub id: u32,
    pub score: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub tau_bv: Option<f64>,
    pub tau_ii: Option<f64>,
    pub classifier: Option<String>,
    pub embedder: Option<String>,
    pub removed_views: Vec<RemovedView>,
    pub consistency: Vec<ConsistencyScore>,
    /// Identities dropped for having fewer than two views left.
    pub excluded: Vec<u32>,
    pub kept_identities: Vec<u32>,
}

impl PruneReport {
    pub fn merge(mut self, other: PruneReport) -> PruneReport {
        self.tau_bv = self.tau_bv.or(other.tau_bv);
        self.tau_ii = self.tau_ii.or(other.tau_ii);
        self.classifier = self.classifier.or(other.classifier);
        self.embedder = self.embedder.or(other.embedder);
        self.removed_views.extend(other.removed_views);
        self.consistency.extend(other.consistency);
        self.excluded.extend(other.excluded);
        self.kept_identities = other.kept_identities;
        self
    }
}

/// Scores back views only; drops those whose front-face score is strictly above `tau`.
pub fn janus_filter(
    records: Vec<IdentityRecord>,
    clf: &dyn BackViewClassifier,
    tau: f64,
) -> Result<(Vec<IdentityRecord>, PruneReport)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau_bv must be in (0, 1), got {tau}")));
    }
    let mut report = PruneReport { tau_bv: Some(tau), classifier: Some(clf.name().into()), ..Default::default() };
    let mut out = Vec::with_capacity(records.len());
    for mut r in records {
        let mut kept = Vec::with_capacity(r.views.len());
        for mut v in r.views {
            if is_back_view(v.azimuth) {
                let score = clf.score(&v.image);
                v.front_score = Some(score);
                if score > tau {
                    report.removed_views.push(RemovedView { id: r.id, azimuth: v.azimuth, score });
                    continue;
                }
            }
            kept.push(v);
        }
        r.views = kept;
        report.kept_identities.push(r.id);
        out.push(r);
    }
    Ok((out, report))
}

/// Template classifier whose prototypes are frontal and rear renders of
/// `count` reference identities drawn from `seed`.
pub fn reference_classifier(seed: u64, image_size: usize, count: usize) -> Result<TemplateClassifier> {
    let refs = super::generate_corpus(count, seed ^ 0x5eed_cafe, super::DataMix::Both, image_size)?;
    let mut fronts = Vec::new();
    let mut backs = Vec::new();
    for r in &refs {
        fronts.push(r.view_at(0.0).expect("frontal view").image.clone());
        backs.push(r.view_at(-180.0).expect("rear view").image.clone());
    }
    Ok(TemplateClassifier::from_examples(Box::new(RandomConvEmbedder::new(seed, 64)), &fronts, &backs))
}

/// Mean cosine similarity over all unordered pairs.
pub fn mean_pairwise_similarity(embeddings: &[Vec<f64>]) -> Option<f64> {
    if embeddings.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            sum += cosine(&embeddings[i], &embeddings[j]);
            pairs += 1;
        }
    }
    Some(sum / pairs as f64)
}

/// Number of identities kept out of `m` at fraction `tau`, rounded up.
pub fn keep_count(m: usize, tau: f64) -> usize {
    // The epsilon absorbs representation error in products such as 0.7 * 10.
    ((tau * m as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Ranks identities not yet ranked by consistency and keeps the top
/// `ceil(tau * M)`; ties go to the lower id. Already-ranked records pass
/// through unchanged, which makes the filter idempotent.
pub fn identity_consistency_filter(
    records: Vec<IdentityRecord>,
    emb: &dyn Embedder,
    tau: f64,
) -> Result<(Vec<IdentityRecord>, PruneReport)> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("tau_ii must be in (0, 1], got {tau}")));
    }
    let mut report = PruneReport { tau_ii: Some(tau), embedder: Some(emb.name().into()), ..Default::default() };
    let mut scored: Vec<(u32, f64)> = Vec::new();
    for r in records.iter().filter(|r| r.consistency.is_none()) {
        let embeddings: Vec<Vec<f64>> = r.views.iter().map(|v| emb.embed(&v.image)).collect();
        match mean_pairwise_similarity(&embeddings) {
            Some(s) => scored.push((r.id, s)),
            None => report.excluded.push(r.id),
        }
    }
    let mut ranked = scored.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep: std::collections::HashSet<u32> = ranked.iter().take(keep_count(ranked.len(), tau)).map(|x| x.0).collect();
    for (id, score) in &ranked {
        report.consistency.push(ConsistencyScore { id: *id, score: *score, kept: keep.contains(id) });
    }
    let mut out = Vec::new();
    for mut r in records {
        if r.consistency.is_none() {
            if !keep.contains(&r.id) {
                continue;
            }
            r.consistency = scored.iter().find(|x| x.0 == r.id).map(|x| x.1);
        }
        report.kept_identities.push(r.id);
        out.push(r);
    }
    Ok((out, report))
}

/// Janus filter followed by the consistency filter.
pub fn prune(
    records: Vec<IdentityRecord>,
    clf: &dyn BackViewClassifier,
    emb: &dyn Embedder,
    tau_bv: f64,
    tau_ii: f64,
) -> Result<(Vec<IdentityRecord>, PruneReport)> {
    let (records, a) = janus_filter(records, clf, tau_bv)?;
    let (records, b) = identity_consistency_filter(records, emb, tau_ii)?;
    Ok((records, a.merge(b)))
}
