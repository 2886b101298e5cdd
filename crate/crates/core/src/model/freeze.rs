use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{Network, Segment, TaskId};
use crate::autodiff::{HasParameters, ParamId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which parameters a training phase may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreezeKind {
    /// Only new heads.
    WarmUp,
    /// Everything.
    LwfJoint,
    /// Trunk and new heads.
    FineTune,
    /// Upper trunk and new heads.
    FineTuneFc,
    /// Only new heads.
    FeatureExtraction,
    /// Trunk and new heads; old heads (including their final layer) fixed.
    Lfl,
    /// Everything.
    JointTraining,
    /// Trunk and new heads.
    L2Anchor,
    /// New heads and the entries added by expansion.
    Expansion,
    /// Everything, expansion masks lifted.
    ExpansionLwf,
}

impl FreezeKind {
    pub const ALL: [FreezeKind; 10] = [
        FreezeKind::WarmUp,
        FreezeKind::LwfJoint,
        FreezeKind::FineTune,
        FreezeKind::FineTuneFc,
        FreezeKind::FeatureExtraction,
        FreezeKind::Lfl,
        FreezeKind::JointTraining,
        FreezeKind::L2Anchor,
        FreezeKind::Expansion,
        FreezeKind::ExpansionLwf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezeKind::WarmUp => "warm-up",
            FreezeKind::LwfJoint => "lwf-joint",
            FreezeKind::FineTune => "fine-tune",
            FreezeKind::FineTuneFc => "fine-tune-fc",
            FreezeKind::FeatureExtraction => "feature-extraction",
            FreezeKind::Lfl => "lfl",
            FreezeKind::JointTraining => "joint-training",
            FreezeKind::L2Anchor => "l2-anchor",
            FreezeKind::Expansion => "expansion",
            FreezeKind::ExpansionLwf => "expansion+lwf",
        }
    }
}

impl fmt::Display for FreezeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreezeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown freeze kind `{s}`")))
    }
}

/// Trainable flag (and optional update mask) for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezePlan {
    kind: FreezeKind,
    trainable: BTreeMap<ParamId, bool>,
    masks: BTreeMap<ParamId, Vec<bool>>,
}

impl FreezePlan {
    pub fn kind(&self) -> FreezeKind {
        self.kind
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.get(&id).copied().unwrap_or(false)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.trainable
            .iter()
            .filter(|(_, &t)| t)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.trainable
            .iter()
            .filter(|(_, &t)| !t)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Sets flags and masks on `net`. Parameters absent from the plan are
    /// frozen.
    pub fn apply<S: Scalar>(&self, net: &mut Network<S>) -> Result<()> {
        for p in net.parameters_mut() {
            p.set_trainable(self.is_trainable(p.id()));
            p.set_update_mask(self.masks.get(&p.id()).cloned())?;
        }
        Ok(())
    }
}

/// Builds the freeze plan of `kind`. Heads of `new_tasks` are θn; every
/// other head is θo.
pub fn freeze_plan<S: Scalar>(
    net: &Network<S>,
    kind: FreezeKind,
    new_tasks: &[TaskId],
) -> Result<FreezePlan> {
    for t in new_tasks {
        net.head(t)?;
    }
    let mut trainable = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for segment in net.segments() {
        let is_new_head = matches!(&segment, Segment::Head(t) if new_tasks.contains(t));
        let on = match (&segment, kind) {
            (_, FreezeKind::LwfJoint | FreezeKind::JointTraining | FreezeKind::ExpansionLwf) => {
                true
            }
            (Segment::Head(_), _) => is_new_head,
            (_, FreezeKind::WarmUp | FreezeKind::FeatureExtraction) => false,
            (_, FreezeKind::FineTune | FreezeKind::Lfl | FreezeKind::L2Anchor) => true,
            (Segment::TrunkLower, FreezeKind::FineTuneFc) => false,
            (Segment::TrunkUpper, FreezeKind::FineTuneFc) => true,
            (_, FreezeKind::Expansion) => false,
        };
        for p in net.segment_parameters(&segment)? {
            let mut flag = on;
            if kind == FreezeKind::Expansion && !matches!(segment, Segment::Head(_)) {
                if let Some(m) = net.expansion_masks().get(&p.id()) {
                    flag = true;
                    masks.insert(p.id(), m.clone());
                }
            }
            trainable.insert(p.id(), flag);
        }
    }
    Ok(FreezePlan {
        kind,
        trainable,
        masks,
    })
}
