//! Few-shot accuracy, open-set scores and thresholding, AUROC and
//! multi-episode aggregation.

mod evaluate;
mod metrics;

pub use evaluate::{
    evaluate, evaluate_episodes, score_episode, EpisodeRecord, EpisodeScores, EvalReport,
    SplitEmbeddings, TrialSummary,
};
pub use metrics::{
    auroc, classify, openset_decide, Decision, OpenSetScore, QueryView, ScoreRule, Stat,
};
