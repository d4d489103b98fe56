//! The nine-row ablation ladder: which inputs, losses, and rewards each
//! configuration activates, in the standard column order.

use serde::{Deserialize, Serialize};

use crate::grpo::RewardToggles;
use crate::pretrain::PretrainToggles;
use crate::rollout::RolloutToggles;

/// One ablation row: input toggles, pretraining losses, rollout losses, and
/// reward terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub id: u8,
    pub sc_desc: bool,
    pub questions: bool,
    pub pre_plan: bool,
    pub pre_mot: bool,
    pub pre_vqa: bool,
    pub roll_tc: bool,
    pub roll_plan: bool,
    pub roll_mot: bool,
    pub rew_coll: bool,
    pub rew_ttc: bool,
    pub rew_vla: bool,
}

impl AblationConfig {
    pub fn runs_stage2(&self) -> bool {
        self.roll_tc
            || self.roll_plan
            || self.roll_mot
            || self.rew_coll
            || self.rew_ttc
            || self.rew_vla
    }

    pub fn pretrain_toggles(&self) -> PretrainToggles {
        PretrainToggles {
            sc_desc: self.sc_desc,
            questions: self.questions,
            plan: self.pre_plan,
            motion: self.pre_mot,
            vqa: self.pre_vqa,
        }
    }

    pub fn rollout_toggles(&self) -> RolloutToggles {
        RolloutToggles {
            tc: self.roll_tc,
            plan: self.roll_plan,
            motion: self.roll_mot,
            refresh_desc: false,
        }
    }

    pub fn reward_toggles(&self) -> RewardToggles {
        RewardToggles { coll: self.rew_coll, ttc: self.rew_ttc, vla: self.rew_vla }
    }

    /// Stage ordering: any Stage-2 activity needs a trained planning head.
    pub fn validate(&self) -> Result<(), String> {
        if self.runs_stage2() && !self.pre_plan {
            return Err(format!(
                "config ID{} enables Stage-2 losses without Stage-1 planning",
                self.id
            ));
        }
        if (self.rew_coll || self.rew_ttc) && !self.roll_tc {
            return Err(format!(
                "config ID{} enables safety rewards without rollout consistency",
                self.id
            ));
        }
        Ok(())
    }
}

/// The nine-row activation pattern, IDs 1 through 9.
pub fn table_ladder() -> [AblationConfig; 9] {
    let base = AblationConfig {
        id: 0,
        sc_desc: false,
        questions: false,
        pre_plan: false,
        pre_mot: false,
        pre_vqa: false,
        roll_tc: false,
        roll_plan: false,
        roll_mot: false,
        rew_coll: false,
        rew_ttc: false,
        rew_vla: false,
    };
    [
        AblationConfig { id: 1, pre_plan: true, ..base },
        AblationConfig { id: 2, pre_plan: true, pre_mot: true, ..base },
        AblationConfig { id: 3, sc_desc: true, pre_plan: true, pre_mot: true, pre_vqa: true, ..base },
        AblationConfig {
            id: 4,
            sc_desc: true,
            pre_plan: true,
            pre_mot: true,
            pre_vqa: true,
            roll_tc: true,
            ..base
        },
        AblationConfig {
            id: 5,
            sc_desc: true,
            pre_plan: true,
            pre_mot: true,
            pre_vqa: true,
            roll_tc: true,
            roll_plan: true,
            ..base
        },
        AblationConfig {
            id: 6,
            sc_desc: true,
            pre_plan: true,
            pre_mot: true,
            pre_vqa: true,
            roll_tc: true,
            roll_plan: true,
            roll_mot: true,
            ..base
        },
        AblationConfig {
            id: 7,
            sc_desc: true,
            pre_plan: true,
            pre_mot: true,
            pre_vqa: true,
            roll_tc: true,
            roll_plan: true,
            roll_mot: true,
            rew_coll: true,
            ..base
        },
        AblationConfig {
            id: 8,
            sc_desc: true,
            pre_plan: true,
            pre_mot: true,
            pre_vqa: true,
            roll_tc: true,
            roll_plan: true,
            roll_mot: true,
            rew_coll: true,
            rew_ttc: true,
            ..base
        },
        AblationConfig {
            id: 9,
            sc_desc: true,
            questions: true,
            pre_plan: true,
            pre_mot: true,
            pre_vqa: true,
            roll_tc: true,
            roll_plan: true,
            roll_mot: true,
            rew_coll: true,
            rew_ttc: true,
            rew_vla: true,
            ..base
        },
    ]
}

pub fn config_by_id(id: u8) -> Option<AblationConfig> {
    table_ladder().into_iter().find(|c| c.id == id)
}

/// One evaluated ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub id: u8,
    pub driving_score: f64,
    pub success_rate: f64,
    pub collision_rate: f64,
}
