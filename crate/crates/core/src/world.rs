//! Attribute-based kinematic world.
//!
//! Objects are axis-aligned boxes described by a 14-entry attribute vector.
//! Primitives are instantaneous state transitions: there is no physics, only
//! the geometric predicates the planner and its features need.
//!
//! Liquids are ordinary objects flagged `liquid`; they live inside a container
//! (recorded in the container's `contained_liquid` list) and are exempt from
//! collision and support checks. An object that rests on a container-flagged
//! object counts as being inside it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Robot is "close" to an object when its ground-plane distance to the
/// object's footprint is at most this many meters.
pub const PROXIMITY: f64 = 0.6;
/// MOVE_CLOSE stops this far from the target centroid.
pub const APPROACH_DISTANCE: f64 = 0.5;
/// HOLD_ABOVE keeps this gap between the held object and the target top.
pub const HOVER_CLEARANCE: f64 = 0.15;
/// Minimum bottom height of a carried object.
pub const CARRY_HEIGHT: f64 = 1.5;
/// Contact and interpenetration tolerance.
pub const CONTACT_TOL: f64 = 1e-6;
/// Containers at least this large are treated as garbage cans.
pub const GARBAGE_CAN_MIN_VOLUME: f64 = 0.05;
/// Containers whose median/max extent ratio is below this are narrow
/// vessels (bottles) rather than open receptacles.
pub const OPEN_RECEPTACLE_MIN_RATIO: f64 = 0.5;

const SPOT_STEP: f64 = 0.025;

/// Object identifier. Zero is reserved for NULL and never instantiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u32);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "obj{:02}", self.0)
    }
}

/// The 14 object attributes: six continuous, eight binary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub height: f64,
    pub max_wl: f64,
    pub min_wl: f64,
    pub volume: f64,
    pub min_over_max: f64,
    pub median_over_max: f64,
    pub cylinder_shape: bool,
    pub box_shape: bool,
    pub liquid: bool,
    pub container: bool,
    pub handle: bool,
    pub movable: bool,
    pub large_horizontal_surface: bool,
    pub multiple_large_horizontal_surface: bool,
}

/// The binary attribute flags, in attribute-vector order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flags {
    pub cylinder_shape: bool,
    pub box_shape: bool,
    pub liquid: bool,
    pub container: bool,
    pub handle: bool,
    pub movable: bool,
    pub large_horizontal_surface: bool,
    pub multiple_large_horizontal_surface: bool,
}

impl AttributeVector {
    pub const LEN: usize = 14;
    pub const CONTINUOUS: usize = 6;
    pub const NAMES: [&'static str; 14] = [
        "height",
        "max_wl",
        "min_wl",
        "volume",
        "min_over_max",
        "median_over_max",
        "cylinder_shape",
        "box_shape",
        "liquid",
        "container",
        "handle",
        "movable",
        "large_horizontal_surface",
        "multiple_large_horizontal_surface",
    ];

    /// Derives the continuous attributes from `(width, length, height)`.
    pub fn from_dims(dims: [f64; 3], flags: Flags) -> Self {
        let [w, l, h] = dims;
        let mut sorted = dims;
        sorted.sort_by(f64::total_cmp);
        let max = sorted[2];
        Self {
            height: h,
            max_wl: w.max(l),
            min_wl: w.min(l),
            volume: w * l * h,
            min_over_max: sorted[0] / max,
            median_over_max: sorted[1] / max,
            cylinder_shape: flags.cylinder_shape,
            box_shape: flags.box_shape,
            liquid: flags.liquid,
            container: flags.container,
            handle: flags.handle,
            movable: flags.movable,
            large_horizontal_surface: flags.large_horizontal_surface,
            multiple_large_horizontal_surface: flags.multiple_large_horizontal_surface,
        }
    }

    pub fn flags(&self) -> [bool; 8] {
        [
            self.cylinder_shape,
            self.box_shape,
            self.liquid,
            self.container,
            self.handle,
            self.movable,
            self.large_horizontal_surface,
            self.multiple_large_horizontal_surface,
        ]
    }

    pub fn set_flags(&mut self, f: [bool; 8]) {
        self.cylinder_shape = f[0];
        self.box_shape = f[1];
        self.liquid = f[2];
        self.container = f[3];
        self.handle = f[4];
        self.movable = f[5];
        self.large_horizontal_surface = f[6];
        self.multiple_large_horizontal_surface = f[7];
    }

    /// Raw values in attribute order, flags as 0/1.
    pub fn to_array(&self) -> [f64; 14] {
        let mut out = [0.0; 14];
        out[..6].copy_from_slice(&[
            self.height,
            self.max_wl,
            self.min_wl,
            self.volume,
            self.min_over_max,
            self.median_over_max,
        ]);
        for (slot, flag) in out[6..].iter_mut().zip(self.flags()) {
            *slot = if flag { 1.0 } else { 0.0 };
        }
        out
    }

    /// An open surface one can work on: a table, not a shelf.
    pub fn is_open_surface(&self) -> bool {
        self.large_horizontal_surface && !self.multiple_large_horizontal_surface
    }

    pub fn is_shelf(&self) -> bool {
        self.multiple_large_horizontal_surface
    }

    pub fn is_garbage_can(&self) -> bool {
        self.container && self.volume >= GARBAGE_CAN_MIN_VOLUME
    }

    pub fn is_open_receptacle(&self) -> bool {
        self.container && !self.liquid && self.median_over_max >= OPEN_RECEPTACLE_MIN_RATIO
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: ObjectId,
    /// Box center, meters.
    pub center: [f64; 3],
    /// (width along x, length along y, height along z), meters.
    pub dims: [f64; 3],
    pub attributes: AttributeVector,
    /// Liquids held by this container, ascending id order.
    #[serde(default)]
    pub contained_liquid: Vec<ObjectId>,
    #[serde(default)]
    pub stirred: bool,
}

impl ObjectState {
    pub fn new(id: ObjectId, center: [f64; 3], dims: [f64; 3], flags: Flags) -> Self {
        Self {
            id,
            center,
            dims,
            attributes: AttributeVector::from_dims(dims, flags),
            contained_liquid: Vec::new(),
            stirred: false,
        }
    }

    pub fn bottom(&self) -> f64 {
        self.center[2] - self.dims[2] / 2.0
    }

    pub fn top(&self) -> f64 {
        self.center[2] + self.dims[2] / 2.0
    }

    pub fn footprint(&self) -> Rect {
        Rect::centered([self.center[0], self.center[1]], self.dims[0], self.dims[1])
    }

    pub fn is_liquid(&self) -> bool {
        self.attributes.liquid
    }

    fn set_bottom(&mut self, z: f64) {
        self.center[2] = z + self.dims[2] / 2.0;
    }
}

/// Axis-aligned rectangle on the ground plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn centered(c: [f64; 2], w: f64, l: f64) -> Self {
        Self {
            min: [c[0] - w / 2.0, c[1] - l / 2.0],
            max: [c[0] + w / 2.0, c[1] + l / 2.0],
        }
    }

    /// Overlap area, zero when disjoint or merely touching.
    pub fn overlap_area(&self, other: &Rect) -> f64 {
        let dx = self.max[0].min(other.max[0]) - self.min[0].max(other.min[0]);
        let dy = self.max[1].min(other.max[1]) - self.min[1].max(other.min[1]);
        if dx > CONTACT_TOL && dy > CONTACT_TOL {
            dx * dy
        } else {
            0.0
        }
    }

    pub fn distance_to_point(&self, p: [f64; 2]) -> f64 {
        let dx = (self.min[0] - p[0]).max(0.0).max(p[0] - self.max[0]);
        let dy = (self.min[1] - p[1]).max(0.0).max(p[1] - self.max[1]);
        dx.hypot(dy)
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.min[0] >= self.min[0] - CONTACT_TOL
            && other.min[1] >= self.min[1] - CONTACT_TOL
            && other.max[0] <= self.max[0] + CONTACT_TOL
            && other.max[1] <= self.max[1] + CONTACT_TOL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    /// Ground-plane position, meters.
    pub position: [f64; 2],
    pub gripper: Option<ObjectId>,
}

/// Primitive controllers, in enumeration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Primitive {
    MoveClose,
    Grasp,
    Release,
    PlaceAbove,
    HoldAbove,
    FollowTrajCircle,
    FollowTrajPour,
    Done,
}

impl Primitive {
    pub const COUNT: usize = 8;
    pub const ALL: [Primitive; 8] = [
        Primitive::MoveClose,
        Primitive::Grasp,
        Primitive::Release,
        Primitive::PlaceAbove,
        Primitive::HoldAbove,
        Primitive::FollowTrajCircle,
        Primitive::FollowTrajPour,
        Primitive::Done,
    ];
    /// The seven manipulation/navigation primitives (everything but DONE).
    pub const CONTROLLERS: [Primitive; 7] = [
        Primitive::MoveClose,
        Primitive::Grasp,
        Primitive::Release,
        Primitive::PlaceAbove,
        Primitive::HoldAbove,
        Primitive::FollowTrajCircle,
        Primitive::FollowTrajPour,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn arity(self) -> usize {
        match self {
            Primitive::Done => 0,
            Primitive::PlaceAbove | Primitive::HoldAbove | Primitive::FollowTrajPour => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MoveClose => "move_close",
            Primitive::Grasp => "grasp",
            Primitive::Release => "release",
            Primitive::PlaceAbove => "place_above",
            Primitive::HoldAbove => "hold_above",
            Primitive::FollowTrajCircle => "follow_traj_circle",
            Primitive::FollowTrajPour => "follow_traj_pour",
            Primitive::Done => "done",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A primitive with its (possibly NULL) object arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub primitive: Primitive,
    pub a1: Option<ObjectId>,
    pub a2: Option<ObjectId>,
}

impl Action {
    pub const DONE: Action = Action { primitive: Primitive::Done, a1: None, a2: None };

    pub fn unary(primitive: Primitive, a1: ObjectId) -> Self {
        Self { primitive, a1: Some(a1), a2: None }
    }

    pub fn binary(primitive: Primitive, a1: ObjectId, a2: ObjectId) -> Self {
        Self { primitive, a1: Some(a1), a2: Some(a2) }
    }

    /// Arity and distinct-argument rules.
    pub fn is_well_formed(&self) -> bool {
        let args = self.a1.is_some() as usize + self.a2.is_some() as usize;
        let ordered = self.a1.is_some() || self.a2.is_none();
        let distinct = self.a1.is_none() || self.a1 != self.a2;
        let nonzero = [self.a1, self.a2].iter().flatten().all(|id| id.0 != 0);
        args == self.primitive.arity() && ordered && distinct && nonzero
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.a1, self.a2) {
            (Some(a), Some(b)) => write!(f, "{}({a},{b})", self.primitive),
            (Some(a), None) => write!(f, "{}({a})", self.primitive),
            _ => write!(f, "{}", self.primitive),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Stir,
    PickAndPlace,
    Pour,
    PourTo,
    ThrowAway,
}

impl Task {
    pub const COUNT: usize = 5;
    pub const ALL: [Task; 5] = [Task::Stir, Task::PickAndPlace, Task::Pour, Task::PourTo, Task::ThrowAway];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn takes_second_argument(self) -> bool {
        matches!(self, Task::PickAndPlace | Task::PourTo)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Stir => "stir",
            Task::PickAndPlace => "pick_and_place",
            Task::Pour => "pour",
            Task::PourTo => "pour_to",
            Task::ThrowAway => "throw_away",
        }
    }
}

/// A task with its object arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub g_a1: ObjectId,
    pub g_a2: Option<ObjectId>,
}

impl TaskSpec {
    pub fn new(task: Task, g_a1: ObjectId, g_a2: Option<ObjectId>) -> Result<Self, WorldError> {
        let spec = Self { task, g_a1, g_a2 };
        if spec.is_well_formed() {
            Ok(spec)
        } else {
            Err(WorldError::InvalidTask(spec))
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.g_a1.0 != 0 && self.g_a2.is_some() == self.task.takes_second_argument() && self.g_a2 != Some(self.g_a1)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.g_a2 {
            Some(b) => write!(f, "{}({},{b})", self.task.name(), self.g_a1),
            None => write!(f, "{}({})", self.task.name(), self.g_a1),
        }
    }
}

/// Why a primitive cannot execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    Malformed,
    UnknownObject,
    GripperFull,
    GripperEmpty,
    NotGrasped,
    NotMovable,
    TooFar,
    ObjectOnTop,
    NoSpace,
    HoverBlocked,
    NoLiquid,
    NotContainer,
    NotHovering,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned));
        f.write_str(s.as_deref().unwrap_or("UNKNOWN"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("action {action} rejected: {reason}")]
    Rejected { action: Action, reason: Reason },
    #[error("malformed task {0}")]
    InvalidTask(TaskSpec),
    #[error("invalid world state: {0}")]
    Invalid(String),
}

/// Complete environment snapshot. Immutable in use: primitives return a new state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWorld", into = "RawWorld")]
pub struct WorldState {
    pub objects: BTreeMap<ObjectId, ObjectState>,
    pub robot: RobotState,
    pub step_index: u32,
}

#[derive(Serialize, Deserialize)]
struct RawWorld {
    objects: Vec<ObjectState>,
    robot: RobotState,
    #[serde(default)]
    step_index: u32,
}

impl TryFrom<RawWorld> for WorldState {
    type Error = WorldError;

    fn try_from(raw: RawWorld) -> Result<Self, Self::Error> {
        let mut objects = BTreeMap::new();
        for obj in raw.objects {
            if obj.id.0 == 0 {
                return Err(WorldError::Invalid("object id 0 is reserved".into()));
            }
            let id = obj.id;
            if objects.insert(id, obj).is_some() {
                return Err(WorldError::Invalid(format!("duplicate object id {id}")));
            }
        }
        Ok(Self { objects, robot: raw.robot, step_index: raw.step_index })
    }
}

impl From<WorldState> for RawWorld {
    fn from(w: WorldState) -> Self {
        Self { objects: w.objects.into_values().collect(), robot: w.robot, step_index: w.step_index }
    }
}

impl WorldState {
    pub fn new(objects: impl IntoIterator<Item = ObjectState>, robot: RobotState) -> Result<Self, WorldError> {
        RawWorld { objects: objects.into_iter().collect(), robot, step_index: 0 }.try_into()
    }

    pub fn object(&self, id: ObjectId) -> Result<&ObjectState, WorldError> {
        self.objects.get(&id).ok_or(WorldError::UnknownObject(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.objects.keys().copied()
    }

    pub fn is_grasped(&self, id: ObjectId) -> bool {
        self.robot.gripper == Some(id)
    }

    /// The container whose `contained_liquid` lists `liquid`.
    pub fn container_of(&self, liquid: ObjectId) -> Option<ObjectId> {
        self.objects.values().find(|o| o.contained_liquid.contains(&liquid)).map(|o| o.id)
    }

    fn solids(&self) -> impl Iterator<Item = &ObjectState> {
        self.objects.values().filter(|o| !o.is_liquid())
    }

    /// Non-liquid objects resting directly on `id`.
    pub fn objects_on_top(&self, id: ObjectId) -> Vec<ObjectId> {
        self.solids()
            .filter(|o| o.id != id && !self.is_grasped(o.id))
            .filter(|o| matches!(object_directly_below(self, o.id), Ok(Some(b)) if b == id))
            .map(|o| o.id)
            .collect()
    }

    /// Robot within [`PROXIMITY`] of the object's footprint; held objects are always close.
    pub fn is_close(&self, id: ObjectId) -> Result<bool, WorldError> {
        let obj = self.object(id)?;
        Ok(self.is_grasped(id) || obj.footprint().distance_to_point(self.robot.position) <= PROXIMITY + CONTACT_TOL)
    }

    /// Held object `a` hovers above `b` at pour height.
    pub fn is_hovering_above(&self, a: ObjectId, b: ObjectId) -> Result<bool, WorldError> {
        let (oa, ob) = (self.object(a)?, self.object(b)?);
        let aligned = (oa.center[0] - ob.center[0]).abs() <= CONTACT_TOL && (oa.center[1] - ob.center[1]).abs() <= CONTACT_TOL;
        Ok(self.is_grasped(a) && aligned && (oa.bottom() - (ob.top() + HOVER_CLEARANCE)).abs() <= CONTACT_TOL)
    }

    fn move_object(&mut self, id: ObjectId, center: [f64; 3]) {
        let Some(obj) = self.objects.get_mut(&id) else { return };
        obj.center = center;
        let bottom = obj.bottom();
        let liquids = obj.contained_liquid.clone();
        for l in liquids {
            if let Some(liq) = self.objects.get_mut(&l) {
                liq.center[0] = center[0];
                liq.center[1] = center[1];
                liq.set_bottom(bottom);
            }
        }
    }

    /// Highest top among solids under `rect` that sit no higher than `below_z`.
    fn highest_top_under(&self, rect: &Rect, below_z: f64, exclude: ObjectId) -> f64 {
        self.solids()
            .filter(|o| o.id != exclude && o.top() <= below_z + CONTACT_TOL)
            .filter(|o| o.footprint().overlap_area(rect) > 0.0)
            .map(ObjectState::top)
            .fold(0.0, f64::max)
    }

    /// Whether a box of `dims` centered at `center` would interpenetrate any
    /// solid other than `exclude`.
    pub fn box_collides(&self, center: [f64; 3], dims: [f64; 3], exclude: ObjectId) -> bool {
        self.solids().filter(|o| o.id != exclude).any(|o| boxes_interpenetrate(center, dims, o.center, o.dims))
    }

    /// Free resting spot for `obj` on the top face of `surface`, nearest the robot.
    pub fn free_spot_on(&self, obj: ObjectId, surface: ObjectId) -> Result<Option<[f64; 3]>, WorldError> {
        let (o, s) = (self.object(obj)?, self.object(surface)?);
        if s.is_liquid() || o.dims[0] > s.dims[0] + CONTACT_TOL || o.dims[1] > s.dims[1] + CONTACT_TOL {
            return Ok(None);
        }
        let top = s.top();
        let z = top + o.dims[2] / 2.0;
        let fp = s.footprint();
        let (hw, hl) = (o.dims[0] / 2.0, o.dims[1] / 2.0);
        let axis = |lo: f64, hi: f64| -> Vec<f64> {
            if hi - lo < 1e-9 {
                return vec![(lo + hi) / 2.0];
            }
            let n = ((hi - lo) / SPOT_STEP).floor() as usize;
            let mut v: Vec<f64> = (0..=n).map(|i| lo + i as f64 * SPOT_STEP).collect();
            if hi - v[n] > 1e-9 {
                v.push(hi);
            }
            v
        };
        let xs = axis(fp.min[0] + hw, fp.max[0] - hw);
        let ys = axis(fp.min[1] + hl, fp.max[1] - hl);
        let robot = self.robot.position;
        let mut spots: Vec<(f64, f64, f64)> = xs
            .iter()
            .flat_map(|&x| ys.iter().map(move |&y| ((x - robot[0]).hypot(y - robot[1]), x, y)))
            .collect();
        spots.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
        Ok(spots.into_iter().map(|(_, x, y)| [x, y, z]).find(|&c| !self.box_collides(c, o.dims, obj)))
    }

    /// Checks every structural and geometric invariant.
    pub fn check_invariants(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Invalid(m));
        for (id, obj) in &self.objects {
            if id.0 == 0 || obj.id != *id {
                return bad(format!("object key {id} does not match id {}", obj.id));
            }
            if obj.dims.iter().any(|&d| d.is_nan() || d <= 0.0) {
                return bad(format!("{id} has non-positive dims"));
            }
            let a = &obj.attributes;
            if [a.height, a.max_wl, a.min_wl, a.volume, a.min_over_max, a.median_over_max].iter().any(|&v| v < 0.0)
                || a.min_over_max > a.median_over_max + 1e-12
                || a.median_over_max > 1.0 + 1e-12
            {
                return bad(format!("{id} has inconsistent attribute ratios"));
            }
            let vol = obj.dims.iter().product::<f64>();
            if (a.volume - vol).abs() > 1e-9 * vol.max(1e-12) {
                return bad(format!("{id} volume does not match dims"));
            }
            for l in &obj.contained_liquid {
                match self.objects.get(l) {
                    Some(liq) if liq.is_liquid() => {}
                    _ => return bad(format!("{id} contains non-liquid {l}")),
                }
            }
        }
        if let Some(g) = self.robot.gripper {
            match self.objects.get(&g) {
                Some(o) if o.attributes.movable => {}
                _ => return bad(format!("gripper holds invalid object {g}")),
            }
        }
        let solids: Vec<&ObjectState> = self.solids().collect();
        for (i, a) in solids.iter().enumerate() {
            for b in &solids[i + 1..] {
                if boxes_interpenetrate(a.center, a.dims, b.center, b.dims) {
                    return bad(format!("{} and {} interpenetrate", a.id, b.id));
                }
            }
        }
        for obj in self.objects.values() {
            if obj.is_liquid() {
                let holders: Vec<_> = self.objects.values().filter(|o| o.contained_liquid.contains(&obj.id)).collect();
                let [holder] = holders.as_slice() else {
                    return bad(format!("liquid {} has {} containers", obj.id, holders.len()));
                };
                let inside = holder.footprint().contains_rect(&obj.footprint())
                    && (obj.bottom() - holder.bottom()).abs() <= CONTACT_TOL;
                if !inside {
                    return bad(format!("liquid {} is not inside {}", obj.id, holder.id));
                }
            } else if !self.is_grasped(obj.id) {
                let on_floor = obj.bottom().abs() <= CONTACT_TOL;
                if !on_floor && object_directly_below(self, obj.id)?.is_none() {
                    return bad(format!("{} floats at z={:.4}", obj.id, obj.bottom()));
                }
            }
        }
        Ok(())
    }
}

/// Positive-volume intersection of two boxes.
pub fn boxes_interpenetrate(ca: [f64; 3], da: [f64; 3], cb: [f64; 3], db: [f64; 3]) -> bool {
    (0..3).all(|k| (da[k] + db[k]) / 2.0 - (ca[k] - cb[k]).abs() > CONTACT_TOL)
}

/// Ground-plane distance from the robot to the object centroid; zero for a held object.
pub fn distance_to(state: &WorldState, id: ObjectId) -> Result<f64, WorldError> {
    let obj = state.object(id)?;
    if state.is_grasped(id) {
        return Ok(0.0);
    }
    let [x, y] = state.robot.position;
    Ok((obj.center[0] - x).hypot(obj.center[1] - y))
}

/// Whether the two footprints intersect with positive area.
pub fn aabb_overlap_topview(state: &WorldState, a: ObjectId, b: ObjectId) -> Result<bool, WorldError> {
    let (oa, ob) = (state.object(a)?, state.object(b)?);
    Ok(oa.footprint().overlap_area(&ob.footprint()) > 0.0)
}

/// Whether the two boxes interpenetrate.
pub fn in_collision(state: &WorldState, a: ObjectId, b: ObjectId) -> Result<bool, WorldError> {
    let (oa, ob) = (state.object(a)?, state.object(b)?);
    Ok(a != b && boxes_interpenetrate(oa.center, oa.dims, ob.center, ob.dims))
}

/// The object whose top face supports `id`; `None` on the floor or in the gripper.
///
/// A liquid's support is its container. With several touching supports the
/// one with the largest contact area wins, ties to the lowest id.
pub fn object_directly_below(state: &WorldState, id: ObjectId) -> Result<Option<ObjectId>, WorldError> {
    let obj = state.object(id)?;
    if state.is_grasped(id) {
        return Ok(None);
    }
    if obj.is_liquid() {
        return Ok(state.container_of(id));
    }
    Ok(best_support(state, obj, |o| (o.top() - obj.bottom()).abs() <= CONTACT_TOL))
}

/// Geometric support of a solid object, whether or not it is grasped.
pub fn resting_support(state: &WorldState, id: ObjectId) -> Result<Option<ObjectId>, WorldError> {
    let obj = state.object(id)?;
    if obj.is_liquid() {
        return Ok(state.container_of(id));
    }
    Ok(best_support(state, obj, |o| (o.top() - obj.bottom()).abs() <= CONTACT_TOL))
}

/// Object underneath `id` for feature purposes: the support for resting
/// objects, and for a held object the highest solid beneath its footprint.
pub fn object_beneath(state: &WorldState, id: ObjectId) -> Result<Option<ObjectId>, WorldError> {
    if !state.is_grasped(id) {
        return object_directly_below(state, id);
    }
    let obj = state.object(id)?;
    let liquids = &obj.contained_liquid;
    let candidates: Vec<&ObjectState> = state
        .solids()
        .filter(|o| o.id != id && !liquids.contains(&o.id) && o.top() <= obj.bottom() + CONTACT_TOL)
        .filter(|o| o.footprint().overlap_area(&obj.footprint()) > 0.0)
        .collect();
    let top = candidates.iter().map(|o| o.top()).fold(f64::NEG_INFINITY, f64::max);
    Ok(best_support(state, obj, |o| candidates.iter().any(|c| c.id == o.id) && (o.top() - top).abs() <= CONTACT_TOL))
}

fn best_support(state: &WorldState, obj: &ObjectState, touching: impl Fn(&ObjectState) -> bool) -> Option<ObjectId> {
    let fp = obj.footprint();
    let mut best: Option<(f64, ObjectId)> = None;
    for o in state.solids() {
        if o.id == obj.id || !touching(o) {
            continue;
        }
        let area = o.footprint().overlap_area(&fp);
        if area > 0.0 && best.map_or(true, |(a, _)| area > a) {
            best = Some((area, o.id));
        }
    }
    best.map(|(_, id)| id)
}

/// Executability of `action` in `state`; `Err` carries the blocking reason.
pub fn check_preconditions(state: &WorldState, action: &Action) -> Result<(), Reason> {
    if !action.is_well_formed() {
        return Err(Reason::Malformed);
    }
    for id in [action.a1, action.a2].into_iter().flatten() {
        if !state.objects.contains_key(&id) {
            return Err(Reason::UnknownObject);
        }
    }
    let holds = |id: ObjectId| state.is_grasped(id);
    let close = |id: ObjectId| state.is_close(id).unwrap_or(false);
    let obj = |id: ObjectId| &state.objects[&id];
    let require = |ok: bool, r: Reason| if ok { Ok(()) } else { Err(r) };
    match (action.primitive, action.a1, action.a2) {
        (Primitive::MoveClose, Some(_), None) | (Primitive::Done, None, None) => Ok(()),
        (Primitive::Grasp, Some(a), None) => {
            require(state.robot.gripper.is_none(), Reason::GripperFull)?;
            require(obj(a).attributes.movable, Reason::NotMovable)?;
            require(close(a), Reason::TooFar)?;
            require(state.objects_on_top(a).is_empty(), Reason::ObjectOnTop)
        }
        (Primitive::Release, Some(a), None) => require(holds(a), Reason::NotGrasped),
        (Primitive::PlaceAbove, Some(a), Some(b)) => {
            require(holds(a), Reason::NotGrasped)?;
            require(close(b), Reason::TooFar)?;
            require(!obj(a).contained_liquid.contains(&b), Reason::NoSpace)?;
            require(matches!(state.free_spot_on(a, b), Ok(Some(_))), Reason::NoSpace)
        }
        (Primitive::HoldAbove, Some(a), Some(b)) => {
            require(holds(a), Reason::NotGrasped)?;
            require(close(b), Reason::TooFar)?;
            require(!obj(a).contained_liquid.contains(&b), Reason::HoverBlocked)?;
            let (c, d) = hover_pose(obj(a), obj(b));
            require(!state.box_collides(c, d, a), Reason::HoverBlocked)
        }
        (Primitive::FollowTrajPour, Some(a), Some(b)) => {
            require(holds(a), Reason::NotGrasped)?;
            require(!obj(a).contained_liquid.is_empty(), Reason::NoLiquid)?;
            require(obj(b).attributes.container, Reason::NotContainer)?;
            require(state.is_hovering_above(a, b).unwrap_or(false), Reason::NotHovering)
        }
        (Primitive::FollowTrajCircle, Some(a), None) => {
            let Some(tool) = state.robot.gripper else { return Err(Reason::GripperEmpty) };
            require(tool != a, Reason::NotHovering)?;
            require(!obj(a).contained_liquid.is_empty(), Reason::NoLiquid)?;
            require(state.is_hovering_above(tool, a).unwrap_or(false), Reason::NotHovering)
        }
        _ => Err(Reason::Malformed),
    }
}

fn hover_pose(held: &ObjectState, target: &ObjectState) -> ([f64; 3], [f64; 3]) {
    let z = target.top() + HOVER_CLEARANCE + held.dims[2] / 2.0;
    ([target.center[0], target.center[1], z], held.dims)
}

/// Deterministic successor state.
pub fn apply_primitive(state: &WorldState, action: &Action) -> Result<WorldState, WorldError> {
    check_preconditions(state, action).map_err(|reason| WorldError::Rejected { action: *action, reason })?;
    let mut next = state.clone();
    match (action.primitive, action.a1, action.a2) {
        (Primitive::Done, ..) => return Ok(next),
        (Primitive::MoveClose, Some(target), _) => {
            if !state.is_grasped(target) {
                let c = state.objects[&target].center;
                let [rx, ry] = state.robot.position;
                let (dx, dy) = (rx - c[0], ry - c[1]);
                let norm = dx.hypot(dy);
                let (ux, uy) = if norm > 1e-12 { (dx / norm, dy / norm) } else { (1.0, 0.0) };
                next.robot.position = [c[0] + APPROACH_DISTANCE * ux, c[1] + APPROACH_DISTANCE * uy];
            }
            if let Some(held) = state.robot.gripper {
                let obj = &next.objects[&held];
                let [x, y] = next.robot.position;
                let fp = Rect::centered([x, y], obj.dims[0], obj.dims[1]);
                let floor = next.highest_top_under(&fp, f64::INFINITY, held).max(CARRY_HEIGHT);
                let center = [x, y, floor + obj.dims[2] / 2.0];
                next.move_object(held, center);
            }
        }
        (Primitive::Grasp, Some(a), _) => next.robot.gripper = Some(a),
        (Primitive::Release, Some(a), _) => {
            next.robot.gripper = None;
            let obj = &next.objects[&a];
            let z = next.highest_top_under(&obj.footprint(), obj.bottom(), a);
            let center = [obj.center[0], obj.center[1], z + obj.dims[2] / 2.0];
            next.move_object(a, center);
        }
        (Primitive::PlaceAbove, Some(a), Some(b)) => {
            let spot = state.free_spot_on(a, b)?.ok_or(WorldError::Rejected { action: *action, reason: Reason::NoSpace })?;
            next.move_object(a, spot);
        }
        (Primitive::HoldAbove, Some(a), Some(b)) => {
            let (c, _) = hover_pose(&state.objects[&a], &state.objects[&b]);
            next.move_object(a, c);
        }
        (Primitive::FollowTrajPour, Some(a), Some(b)) => {
            let liquids = std::mem::take(&mut next.objects.get_mut(&a).expect("checked").contained_liquid);
            let target = next.objects.get_mut(&b).expect("checked");
            target.contained_liquid.extend(liquids);
            target.contained_liquid.sort();
            let center = target.center;
            next.move_object(b, center);
        }
        (Primitive::FollowTrajCircle, Some(a), _) => {
            for l in next.objects[&a].contained_liquid.clone() {
                next.objects.get_mut(&l).expect("liquid exists").stirred = true;
            }
        }
        _ => unreachable!("preconditions reject malformed actions"),
    }
    next.step_index += 1;
    Ok(next)
}

/// Whether the task's goal holds in `state`.
pub fn task_goal_satisfied(state: &WorldState, task: &TaskSpec) -> Result<bool, WorldError> {
    let g1 = state.object(task.g_a1)?;
    let second = task.g_a2.map(|id| state.object(id)).transpose()?;
    let rests_on_open_surface = |id: ObjectId| -> Result<bool, WorldError> {
        Ok(!state.is_grasped(id)
            && object_directly_below(state, id)?.map_or(false, |s| state.objects[&s].attributes.is_open_surface()))
    };
    Ok(match task.task {
        Task::Stir => match state.container_of(task.g_a1) {
            Some(c) => g1.stirred && rests_on_open_surface(c)?,
            None => false,
        },
        Task::PickAndPlace => {
            let b = second.expect("well-formed task").id;
            !state.is_grasped(g1.id) && object_directly_below(state, g1.id)? == Some(b)
        }
        Task::Pour => match state.container_of(task.g_a1) {
            Some(c) => state.objects[&c].attributes.is_open_receptacle() && rests_on_open_surface(c)?,
            None => false,
        },
        Task::PourTo => state.container_of(task.g_a1) == task.g_a2,
        Task::ThrowAway => {
            !state.is_grasped(g1.id)
                && object_directly_below(state, g1.id)?.map_or(false, |s| state.objects[&s].attributes.is_garbage_can())
        }
    })
}

/// Every well-formed action over the state's objects, in enumeration order:
/// primitive order, then `a1` id, then `a2` id.
pub fn enumerate_actions(state: &WorldState) -> Vec<Action> {
    let ids: Vec<ObjectId> = state.ids().collect();
    let mut out = Vec::with_capacity(8 * ids.len() * ids.len());
    for p in Primitive::ALL {
        match p.arity() {
            0 => out.push(Action { primitive: p, a1: None, a2: None }),
            1 => out.extend(ids.iter().map(|&a| Action::unary(p, a))),
            _ => {
                for &a in &ids {
                    out.extend(ids.iter().filter(|&&b| b != a).map(|&b| Action::binary(p, a, b)));
                }
            }
        }
    }
    out
}

/// Enumerated actions whose preconditions hold, in enumeration order.
pub fn executable_actions(state: &WorldState) -> Vec<Action> {
    let ids: Vec<ObjectId> = state.ids().collect();
    let mut out = Vec::new();
    let held = state.robot.gripper;
    for p in Primitive::ALL {
        match p.arity() {
            0 => out.push(Action::DONE),
            1 => out.extend(ids.iter().map(|&a| Action::unary(p, a)).filter(|a| check_preconditions(state, a).is_ok())),
            _ => {
                // Every binary primitive needs its first argument in the gripper.
                if let Some(a) = held {
                    out.extend(
                        ids.iter()
                            .filter(|&&b| b != a)
                            .map(|&b| Action::binary(p, a, b))
                            .filter(|act| check_preconditions(state, act).is_ok()),
                    );
                }
            }
        }
    }
    out
}
