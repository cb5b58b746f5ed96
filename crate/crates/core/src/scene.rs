//! Synthetic bird's-eye multi-agent scenes.
//!
//! A [`Scene`] is a square world holding axis-aligned objects and `N`
//! agents. Each agent observes a rasterized grid in which an object cell
//! is visible iff the segment from the agent to the cell center crosses no
//! other object (and, optionally, lies within sensor range).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::rng::rng_for;
use made_tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub num_agents: usize,
    pub world_extent: f64,
    /// Grid cells per side (H = W).
    pub grid_size: usize,
    /// Number of classes `k`, background included (class `k`).
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Minimum free space between two objects.
    #[serde(default)]
    pub min_gap: f64,
    /// `None` means unlimited range.
    #[serde(default)]
    pub sensor_range: Option<f64>,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_retries() -> usize {
    200
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_agents: 4,
            world_extent: 32.0,
            grid_size: 32,
            num_classes: 3,
            min_objects: 4,
            max_objects: 8,
            min_object_size: 2.0,
            max_object_size: 5.0,
            min_gap: 1.0,
            sensor_range: Some(18.0),
            max_retries: default_retries(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Invalid(m.to_string()));
        if !(2..=8).contains(&self.num_agents) {
            return bad("num_agents must lie in 2..=8");
        }
        if self.num_classes < 2 {
            return bad("need at least one foreground class");
        }
        if self.grid_size == 0 || !(self.world_extent > 0.0) {
            return bad("grid and world extent must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects");
        }
        if !(self.min_object_size > 0.0) || self.min_object_size > self.max_object_size {
            return bad("object size range must be positive and ordered");
        }
        if self.max_object_size > self.world_extent {
            return bad("objects larger than the world");
        }
        Ok(())
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            world_extent: self.world_extent,
            rows: self.grid_size,
            cols: self.grid_size,
        }
    }

    /// Observation channels: occupancy plus one evidence channel per foreground class.
    pub fn input_channels(&self) -> usize {
        self.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    /// Foreground class in `1..k`.
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub world_extent: f64,
    pub objects: Vec<GroundTruthBox>,
    pub agent_poses: Vec<AgentPose>,
}

/// Maps world coordinates onto the observation grid. `x` runs along columns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub world_extent: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn cell_width(&self) -> f64 {
        self.world_extent / self.cols as f64
    }
    pub fn cell_height(&self) -> f64 {
        self.world_extent / self.rows as f64
    }

    pub fn world_to_grid(&self, b: &BBox) -> BBox {
        let (sx, sy) = (self.cell_width(), self.cell_height());
        BBox::new(b.cx / sx, b.cy / sy, b.w / sx, b.h / sy)
    }

    pub fn grid_to_world(&self, b: &BBox) -> BBox {
        let (sx, sy) = (self.cell_width(), self.cell_height());
        BBox::new(b.cx * sx, b.cy * sy, b.w * sx, b.h * sy)
    }

    /// World coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.cell_width(), (row as f64 + 0.5) * self.cell_height())
    }
}

/// One agent's rasterized view, `H x W x C` channel-last in `[0, 1]`.
///
/// Channel 0 is occupancy; channel `c` (for `c` in `1..k`) is evidence
/// for foreground class `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationGrid {
    pub agent_index: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ObservationGrid {
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn occupied(&self, row: usize, col: usize) -> bool {
        self.at(row, col, 0) > 0.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone())
            .expect("observation values are finite")
    }

    /// Number of observed (occupied) cells.
    pub fn coverage(&self) -> usize {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.occupied(r, c))
            .count()
    }
}

/// Samples a scene. Deterministic in `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng_for(seed, "scene", 0);
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let fg = config.num_classes - 1;
    let mut objects: Vec<GroundTruthBox> = Vec::with_capacity(count);
    for n in 0..count {
        let mut placed = false;
        for _ in 0..config.max_retries.max(1) {
            let w = rng.random_range(config.min_object_size..=config.max_object_size);
            let h = rng.random_range(config.min_object_size..=config.max_object_size);
            let cx = rng.random_range(0.5 * w..=config.world_extent - 0.5 * w);
            let cy = rng.random_range(0.5 * h..=config.world_extent - 0.5 * h);
            let bbox = BBox::new(cx, cy, w, h);
            let grown = bbox.expanded(0.5 * config.min_gap);
            if objects.iter().all(|o| !o.bbox.expanded(0.5 * config.min_gap).overlaps(&grown)) {
                objects.push(GroundTruthBox {
                    class_id: rng.random_range(1..=fg),
                    bbox,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CoreError::Unsatisfiable(format!(
                "placed {n} of {count} objects before exhausting {} retries",
                config.max_retries
            )));
        }
    }
    let mut agent_poses = Vec::with_capacity(config.num_agents);
    for a in 0..config.num_agents {
        let mut placed = false;
        for _ in 0..config.max_retries.max(1) {
            let x = rng.random_range(0.0..config.world_extent);
            let y = rng.random_range(0.0..config.world_extent);
            if objects.iter().all(|o| !o.bbox.expanded(0.5).contains(x, y)) {
                let heading = rng.random_range(0.0..std::f64::consts::TAU);
                agent_poses.push(AgentPose { x, y, heading });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CoreError::Unsatisfiable(format!("no free position for agent {a}")));
        }
    }
    Ok(Scene {
        world_extent: config.world_extent,
        objects,
        agent_poses,
    })
}

impl Scene {
    /// Checks every scene invariant, returning a description of each violation.
    pub fn audit(&self, config: &SceneConfig) -> Vec<String> {
        let mut issues = Vec::new();
        let n = self.agent_poses.len();
        if !(2..=8).contains(&n) {
            issues.push(format!("agent count {n} outside 2..=8"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let b = &o.bbox;
            if !(b.w > 0.0 && b.h > 0.0) {
                issues.push(format!("object {i} has non-positive size"));
            }
            if o.class_id == 0 || o.class_id >= config.num_classes {
                issues.push(format!("object {i} has non-foreground class {}", o.class_id));
            }
            if b.x1() < 0.0 || b.y1() < 0.0 || b.x2() > self.world_extent || b.y2() > self.world_extent {
                issues.push(format!("object {i} leaves the world"));
            }
            for (j, p) in self.objects.iter().enumerate().skip(i + 1) {
                if b.overlaps(&p.bbox) {
                    issues.push(format!("objects {i} and {j} overlap"));
                }
            }
        }
        issues
    }
}

fn check_agent(scene: &Scene, agent_index: usize) -> Result<()> {
    if agent_index >= scene.agent_poses.len() {
        return Err(CoreError::Invalid(format!(
            "agent {agent_index} out of range for {} agents",
            scene.agent_poses.len()
        )));
    }
    Ok(())
}

/// Cells `(row, col, object)` whose center lies in an object.
fn object_cells(scene: &Scene, geom: &GridGeometry) -> Vec<(usize, usize, usize)> {
    let mut cells = Vec::new();
    for (k, o) in scene.objects.iter().enumerate() {
        let b = &o.bbox;
        let c0 = ((b.x1() / geom.cell_width() - 0.5).ceil().max(0.0)) as usize;
        let r0 = ((b.y1() / geom.cell_height() - 0.5).ceil().max(0.0)) as usize;
        for r in r0..geom.rows {
            let (_, y) = geom.cell_center(r, 0);
            if y >= b.y2() {
                break;
            }
            for c in c0..geom.cols {
                let (x, y) = geom.cell_center(r, c);
                if x >= b.x2() {
                    break;
                }
                if b.contains(x, y) {
                    cells.push((r, c, k));
                }
            }
        }
    }
    cells
}

fn visible(scene: &Scene, pose: &AgentPose, range: Option<f64>, target: usize, point: (f64, f64)) -> bool {
    if let Some(r) = range {
        if (point.0 - pose.x).hypot(point.1 - pose.y) > r {
            return false;
        }
    }
    scene
        .objects
        .iter()
        .enumerate()
        .all(|(k, o)| k == target || !o.bbox.intersects_segment((pose.x, pose.y), point))
}

/// Renders agent `agent_index`'s observation grid.
pub fn render_observation(scene: &Scene, agent_index: usize, config: &SceneConfig) -> Result<ObservationGrid> {
    Ok(render_with_visibility(scene, agent_index, config)?.0)
}

/// Per object, the number of its cells the agent observes.
pub fn visible_cell_counts(scene: &Scene, agent_index: usize, config: &SceneConfig) -> Result<Vec<usize>> {
    Ok(render_with_visibility(scene, agent_index, config)?.1)
}

fn render_with_visibility(
    scene: &Scene,
    agent_index: usize,
    config: &SceneConfig,
) -> Result<(ObservationGrid, Vec<usize>)> {
    check_agent(scene, agent_index)?;
    let geom = config.geometry();
    let channels = config.input_channels();
    let mut data = vec![0.0; geom.rows * geom.cols * channels];
    let mut counts = vec![0; scene.objects.len()];
    let pose = &scene.agent_poses[agent_index];
    for (r, c, k) in object_cells(scene, &geom) {
        if visible(scene, pose, config.sensor_range, k, geom.cell_center(r, c)) {
            let base = (r * geom.cols + c) * channels;
            data[base] = 1.0;
            data[base + scene.objects[k].class_id] = 1.0;
            counts[k] += 1;
        }
    }
    let grid = ObservationGrid {
        agent_index,
        height: geom.rows,
        width: geom.cols,
        channels,
        data,
    };
    Ok((grid, counts))
}

/// Ground-truth box in grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBox {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Converts every ground-truth box into grid coordinates.
pub fn ground_truth_proposals(scene: &Scene, geometry: &GridGeometry) -> Vec<GridBox> {
    scene
        .objects
        .iter()
        .map(|o| GridBox {
            class_id: o.class_id,
            bbox: geometry.world_to_grid(&o.bbox),
        })
        .collect()
}
