//! L×H removal grids for one scale of a schedule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Geometry, HeadId};
use crate::scheduler::{Mode, PruneItem, SchedulePlan};

/// Cell codes.
pub const RETAINED: u8 = 0;
pub const PRUNED: u8 = 1;
pub const EARLY: u8 = 2;
pub const ABSENT: u8 = 3;

/// Which set a grid shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridSet {
    /// Every head classified; `E_k` wins over `A_k`, which wins over `G_k`.
    Combined,
    /// Membership in `G_k`.
    Pruned,
    /// Membership in `E_k`.
    Early,
    /// Membership in `A_k`.
    Absent,
}

impl GridSet {
    pub const ALL: [GridSet; 4] = [GridSet::Combined, GridSet::Pruned, GridSet::Early, GridSet::Absent];

    pub fn name(self) -> &'static str {
        match self {
            GridSet::Combined => "combined",
            GridSet::Pruned => "pruned",
            GridSet::Early => "early",
            GridSet::Absent => "absent",
        }
    }
}

impl fmt::Display for GridSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GridSet::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown grid set `{s}`")))
    }
}

/// Grid for scale `k`, rows are layers and columns heads.
///
/// In scale mode `source` restricts the grid to items of one source scale;
/// without it a head takes the highest-priority code over all its items.
pub fn heatmap_grid(
    plan: &SchedulePlan,
    geometry: &Geometry,
    k: usize,
    set: GridSet,
    source: Option<usize>,
) -> Result<Vec<Vec<u8>>> {
    if k == 0 || k >= geometry.num_scales() {
        return Err(Error::Argument(format!(
            "scale {k} outside 1..={}",
            geometry.num_scales() - 1
        )));
    }
    if let Some(i) = source {
        if plan.mode == Mode::Binary {
            return Err(Error::Argument("source scale only applies to scale-mode schedules".into()));
        }
        if !geometry.prunable_scales().contains(&i) {
            return Err(Error::Argument(format!("source scale {i} is not prunable")));
        }
    }
    let step = plan
        .step(k)
        .ok_or_else(|| Error::Argument(format!("schedule has no scale {k}")))?;

    let code = |item: &PruneItem| -> u8 {
        let (early, absent, pruned) = (
            step.early.contains(item),
            step.absent.contains(item),
            step.target.contains(item),
        );
        match set {
            GridSet::Combined if early => EARLY,
            GridSet::Combined if absent => ABSENT,
            GridSet::Combined if pruned => PRUNED,
            GridSet::Pruned if pruned => PRUNED,
            GridSet::Early if early => EARLY,
            GridSet::Absent if absent => ABSENT,
            _ => RETAINED,
        }
    };
    let rank = |c: u8| match c {
        EARLY => 3,
        ABSENT => 2,
        PRUNED => 1,
        _ => 0,
    };

    let mut grid = vec![vec![RETAINED; geometry.heads_per_layer()]; geometry.layers()];
    for head in geometry.heads() {
        let cell = match plan.mode {
            Mode::Binary => code(&PruneItem::Head(head)),
            Mode::Scale => {
                let sources = source.map_or(geometry.prunable_scales(), |i| i..=i);
                sources
                    .map(|i| code(&PruneItem::HeadScale { source_scale: i, head }))
                    .max_by_key(|c| rank(*c))
                    .unwrap_or(RETAINED)
            }
        };
        grid[head.layer - 1][head.head - 1] = cell;
    }
    Ok(grid)
}

/// CSV with a `layer,1,…,H` header and the layer index in the first column.
pub fn grid_csv(grid: &[Vec<u8>]) -> String {
    let heads = grid.first().map_or(0, Vec::len);
    let mut out = String::from("layer");
    for h in 1..=heads {
        out.push_str(&format!(",{h}"));
    }
    out.push('\n');
    for (l, row) in grid.iter().enumerate() {
        out.push_str(&(l + 1).to_string());
        for c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

/// Code of one head, for callers that already hold a grid.
pub fn cell(grid: &[Vec<u8>], head: HeadId) -> u8 {
    grid[head.layer - 1][head.head - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::BudgetPlan;
    use crate::geometry::{Config, ModelShape, ScaleSchedule};
    use crate::importance::PruneOrders;
    use crate::scheduler::{build_schedule, Accounting};

    fn setup(b: f64, mode: Mode) -> (Geometry, SchedulePlan) {
        let g = Config::new(
            ScaleSchedule::new(vec![(1, 1), (1, 2), (2, 2), (2, 4)], 1),
            ModelShape::new(2, 2),
        )
        .validate()
        .unwrap();
        let orders = PruneOrders {
            binary: g.heads().collect(),
            by_scale: g.prunable_scales().map(|i| (i, g.heads().collect())).collect(),
        };
        let budget = BudgetPlan::new(b, &g).unwrap();
        let plan = build_schedule(&g, &orders, &budget, mode, Accounting::Paper).unwrap();
        (g, plan)
    }

    #[test]
    fn full_budget_is_all_zero() {
        let (g, plan) = setup(1.0, Mode::Binary);
        for k in g.cached_scales() {
            let grid = heatmap_grid(&plan, &g, k, GridSet::Combined, None).unwrap();
            assert!(grid.iter().flatten().all(|c| *c == RETAINED));
        }
    }

    #[test]
    fn documented_instance() {
        let (g, plan) = setup(0.5, Mode::Binary);
        let grid = heatmap_grid(&plan, &g, 3, GridSet::Combined, None).unwrap();
        assert_eq!(grid, vec![vec![PRUNED, PRUNED], vec![EARLY, RETAINED]]);
        assert_eq!(grid_csv(&grid), "layer,1,2\n1,1,1\n2,2,0\n");
        let pruned = heatmap_grid(&plan, &g, 3, GridSet::Pruned, None).unwrap();
        assert_eq!(pruned, vec![vec![PRUNED, PRUNED], vec![PRUNED, RETAINED]]);
        assert_eq!(cell(&pruned, HeadId::new(2, 2)), RETAINED);
    }

    #[test]
    fn dimensions_and_errors() {
        let (g, plan) = setup(0.5, Mode::Scale);
        for set in GridSet::ALL {
            let grid = heatmap_grid(&plan, &g, 3, set, Some(3)).unwrap();
            assert_eq!(grid.len(), 2);
            assert!(grid.iter().all(|r| r.len() == 2));
        }
        assert!(matches!(heatmap_grid(&plan, &g, 0, GridSet::Combined, None), Err(Error::Argument(_))));
        assert!(matches!(heatmap_grid(&plan, &g, 4, GridSet::Combined, None), Err(Error::Argument(_))));
        assert!(matches!(heatmap_grid(&plan, &g, 3, GridSet::Combined, Some(1)), Err(Error::Argument(_))));
        let (g, plan) = setup(0.5, Mode::Binary);
        assert!(heatmap_grid(&plan, &g, 3, GridSet::Combined, Some(2)).is_err());
        assert!("bogus".parse::<GridSet>().is_err());
    }
}
