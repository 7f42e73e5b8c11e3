//! Named placement plans and their resolution to insertion points.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::adapters::{solve_split, AdapterKind, AdapterModule, AdapterSpec};
use crate::backbones::{AdapterMap, Backbone, BackboneKind, Block, InsertionPoint};
use crate::error::{LabError, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlacementPlan {
    ArMiddle,
    ArLate,
    UNetPerTransformerLayer,
    UNetPerResnetLayer,
    UNetPerBlock,
    UNetPerBlockMinus(Block),
}

impl PlacementPlan {
    /// Every plan the placement study covers, in report order.
    pub const ALL: [PlacementPlan; 8] = [
        PlacementPlan::ArMiddle,
        PlacementPlan::ArLate,
        PlacementPlan::UNetPerTransformerLayer,
        PlacementPlan::UNetPerResnetLayer,
        PlacementPlan::UNetPerBlock,
        PlacementPlan::UNetPerBlockMinus(Block::Down),
        PlacementPlan::UNetPerBlockMinus(Block::Mid),
        PlacementPlan::UNetPerBlockMinus(Block::Up),
    ];

    pub fn backbone(self) -> BackboneKind {
        match self {
            PlacementPlan::ArMiddle | PlacementPlan::ArLate => BackboneKind::Ar,
            _ => BackboneKind::UNet,
        }
    }

    /// Plans studied on one backbone.
    pub fn for_backbone(kind: BackboneKind) -> Vec<PlacementPlan> {
        Self::ALL.into_iter().filter(|p| p.backbone() == kind).collect()
    }

    /// The sweep's default plan per backbone.
    pub fn default_for(kind: BackboneKind) -> PlacementPlan {
        match kind {
            BackboneKind::Ar => PlacementPlan::ArLate,
            BackboneKind::UNet => PlacementPlan::UNetPerBlock,
        }
    }

    /// The plan whose budget share this one inherits: a block-removal
    /// ablation keeps the per-point share of the full per-block plan.
    pub fn budget_reference(self) -> PlacementPlan {
        match self {
            PlacementPlan::UNetPerBlockMinus(_) => PlacementPlan::UNetPerBlock,
            p => p,
        }
    }
}

impl fmt::Display for PlacementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlacementPlan::ArMiddle => f.write_str("AR_Middle"),
            PlacementPlan::ArLate => f.write_str("AR_Late"),
            PlacementPlan::UNetPerTransformerLayer => f.write_str("UNet_PerTransformerLayer"),
            PlacementPlan::UNetPerResnetLayer => f.write_str("UNet_PerResnetLayer"),
            PlacementPlan::UNetPerBlock => f.write_str("UNet_PerBlock"),
            PlacementPlan::UNetPerBlockMinus(b) => write!(f, "UNet_PerBlock_Minus({b})"),
        }
    }
}

impl FromStr for PlacementPlan {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("UNet_PerBlock_Minus(") {
            let b = rest
                .strip_suffix(')')
                .ok_or_else(|| LabError::Placement(format!("unknown plan {s:?}")))?;
            return Ok(PlacementPlan::UNetPerBlockMinus(b.trim().parse()?));
        }
        Self::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| LabError::Placement(format!("unknown plan {s:?}")))
    }
}

/// Insertion points of `plan` on `backbone`. AR "middle" and "late" are the
/// middle and last thirds of the layer stack (layers 3-4 and 5-6 of six).
pub fn resolve_plan(plan: PlacementPlan, backbone: &dyn Backbone) -> Result<BTreeSet<InsertionPoint>> {
    if plan.backbone() != backbone.kind() {
        return Err(LabError::Compatibility(format!(
            "plan {plan} needs the {} backbone, not {}",
            plan.backbone(),
            backbone.kind()
        )));
    }
    let points: BTreeSet<InsertionPoint> = match plan {
        PlacementPlan::ArMiddle | PlacementPlan::ArLate => {
            let layers = backbone.insertion_points().len();
            let third = layers / 3;
            let range = if plan == PlacementPlan::ArMiddle {
                third + 1..=2 * third
            } else {
                2 * third + 1..=layers
            };
            range.map(InsertionPoint::AfterLayer).collect()
        }
        PlacementPlan::UNetPerTransformerLayer => {
            Block::ALL.iter().map(|&b| InsertionPoint::AfterTransformer(b, 0)).collect()
        }
        PlacementPlan::UNetPerResnetLayer => Block::ALL
            .iter()
            .flat_map(|&b| [InsertionPoint::AfterResnet(b, 0), InsertionPoint::AfterResnet(b, 1)])
            .collect(),
        PlacementPlan::UNetPerBlock => Block::ALL.iter().map(|&b| InsertionPoint::AfterBlock(b)).collect(),
        PlacementPlan::UNetPerBlockMinus(skip) => Block::ALL
            .iter()
            .filter(|&&b| b != skip)
            .map(|&b| InsertionPoint::AfterBlock(b))
            .collect(),
    };
    for p in &points {
        backbone.validate_point(*p)?;
    }
    Ok(points)
}

/// Adapter specs for a plan at a parameter budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SizedPlacement {
    pub plan: PlacementPlan,
    pub points: Vec<InsertionPoint>,
    pub specs: Vec<AdapterSpec>,
    pub counts: Vec<usize>,
    /// Target for the points actually used.
    pub target: usize,
    pub realized: usize,
    pub within_tolerance: bool,
}

impl SizedPlacement {
    /// `after_block(down);after_block(mid)` style listing for reports.
    pub fn point_list(&self) -> String {
        self.points.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";")
    }

    /// Fresh (identity) adapters, one per point, each from its own stream.
    pub fn build(&self, seed: u64) -> Result<AdapterMap> {
        let root = RngState::new(seed).derive_str("adapters");
        self.points
            .iter()
            .zip(&self.specs)
            .map(|(p, spec)| {
                let m = AdapterModule::build(spec, &mut root.derive_str(&p.to_string()))?;
                Ok((*p, m))
            })
            .collect()
    }
}

/// Splits `budget` equally over the points of the plan's budget reference and
/// sizes one adapter per point of `plan`. For a full plan the counts sum to
/// the budget; a block-removal ablation keeps the full plan's per-point share,
/// so it lands near two thirds of the budget.
pub fn size_plan(
    plan: PlacementPlan,
    backbone: &dyn Backbone,
    kind: AdapterKind,
    budget: usize,
    tolerance: f64,
) -> Result<SizedPlacement> {
    if kind.is_2d() != backbone.kind().is_2d() {
        return Err(LabError::Compatibility(format!(
            "{kind} adapters cannot attach to the {} backbone",
            backbone.kind()
        )));
    }
    let points: Vec<InsertionPoint> = resolve_plan(plan, backbone)?.into_iter().collect();
    let reference = resolve_plan(plan.budget_reference(), backbone)?.len();
    let target = budget * points.len() / reference;
    let dim = backbone.adapter_dim(points[0])?;
    if points.iter().any(|p| backbone.adapter_dim(*p).ok() != Some(dim)) {
        return Err(LabError::Compatibility(format!("plan {plan} mixes feature widths")));
    }
    let split = solve_split(kind, dim, target, points.len(), tolerance)?;
    if !split.within_tolerance {
        log::warn!(
            "{plan} with {kind} at {budget}: realized {} is {:.2}% off target {}",
            split.realized,
            100.0 * split.relative_error(),
            target
        );
    }
    Ok(SizedPlacement {
        plan,
        points,
        specs: split.specs,
        counts: split.counts,
        target,
        realized: split.realized,
        within_tolerance: split.within_tolerance,
    })
}
