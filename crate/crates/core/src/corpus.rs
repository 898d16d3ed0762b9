//! Scenario generation, scripted expert demonstrations, attribute noise and
//! the line-delimited corpus format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{
    apply_primitive, check_preconditions, object_beneath, resting_support, task_goal_satisfied, Action, Flags, ObjectId,
    ObjectState, Primitive, RobotState, Task, TaskSpec, WorldError, WorldState, CARRY_HEIGHT, PROXIMITY,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MIN_SEQUENCE_LEN: usize = 4;
pub const MAX_SEQUENCE_LEN: usize = 10;
const HELD_START_RATE: f64 = 0.25;
const ROOM: f64 = 6.0;
const MAX_TRIES: usize = 1000;
const EXPERT_HORIZON: usize = 40;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { line: usize, found: u32 },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("expert cannot solve {task}: {message}")]
    Expert { task: TaskSpec, message: String },
    #[error("sequence {scenario_id}: {message}")]
    Integrity { scenario_id: String, message: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A recorded task demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceExample {
    pub scenario_id: String,
    pub environment_id: String,
    pub task: TaskSpec,
    pub initial_state: WorldState,
    pub steps: Vec<Action>,
}

impl SequenceExample {
    /// Replays the steps, returning every intermediate state (initial first).
    pub fn replay(&self) -> Result<Vec<WorldState>, CorpusError> {
        let mut states = vec![self.initial_state.clone()];
        for (t, a) in self.steps.iter().enumerate() {
            let next = apply_primitive(states.last().expect("non-empty"), a).map_err(|e| CorpusError::Integrity {
                scenario_id: self.scenario_id.clone(),
                message: format!("step {t}: {e}"),
            })?;
            states.push(next);
        }
        Ok(states)
    }

    /// Replays and checks goal, termination and length invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |message: String| Err(CorpusError::Integrity { scenario_id: self.scenario_id.clone(), message });
        if !(MIN_SEQUENCE_LEN..=MAX_SEQUENCE_LEN).contains(&self.steps.len()) {
            return fail(format!("length {} outside [{MIN_SEQUENCE_LEN}, {MAX_SEQUENCE_LEN}]", self.steps.len()));
        }
        if self.steps.last() != Some(&Action::DONE) || self.steps[..self.steps.len() - 1].contains(&Action::DONE) {
            return fail("DONE must be the final step only".into());
        }
        let states = self.replay()?;
        if !task_goal_satisfied(states.last().expect("non-empty"), &self.task)? {
            return fail("goal not satisfied after replay".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_environments: usize,
    pub n_scenarios: usize,
    pub objects_per_environment: (usize, usize),
    pub distractor_count: (usize, usize),
    pub tasks: Vec<Task>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_environments: 13,
            n_scenarios: 127,
            objects_per_environment: (15, 25),
            distractor_count: (2, 6),
            tasks: Task::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Mug,
    Receptacle,
    Bottle,
    Stirrer,
    Liquid,
    Flat,
    Table,
    Shelf,
    GarbageCan,
    Distractor,
}

/// One of the 43 catalog objects. Its object id is its 1-based catalog position.
#[derive(Clone, Copy, Debug)]
pub struct Archetype {
    pub name: &'static str,
    pub category: Category,
    pub dims: [f64; 3],
    flags: &'static str,
}

impl Archetype {
    /// Flag letters: c cylinder, b box, q liquid, k container, h handle, m movable,
    /// s large horizontal surface, S multiple large horizontal surfaces.
    pub fn flags(&self) -> Flags {
        let f = self.flags;
        Flags {
            cylinder_shape: f.contains('c'),
            box_shape: f.contains('b'),
            liquid: f.contains('q'),
            container: f.contains('k'),
            handle: f.contains('h'),
            movable: f.contains('m'),
            large_horizontal_surface: f.contains('s'),
            multiple_large_horizontal_surface: f.contains('S'),
        }
    }
}

const fn arch(name: &'static str, category: Category, dims: [f64; 3], flags: &'static str) -> Archetype {
    Archetype { name, category, dims, flags }
}

use Category::*;

pub const CATALOG: [Archetype; 43] = [
    arch("mug_white", Mug, [0.09, 0.09, 0.10], "ckhm"),
    arch("paper_cup", Receptacle, [0.08, 0.08, 0.10], "ckm"),
    arch("ceramic_bowl", Receptacle, [0.16, 0.16, 0.07], "ckm"),
    arch("glass_bottle", Bottle, [0.07, 0.07, 0.25], "ckm"),
    arch("plastic_bottle", Bottle, [0.08, 0.08, 0.30], "ckm"),
    arch("small_bottle", Bottle, [0.06, 0.06, 0.20], "ckm"),
    arch("wine_bottle", Bottle, [0.075, 0.075, 0.32], "ckm"),
    arch("travel_mug", Mug, [0.085, 0.085, 0.14], "ckhm"),
    arch("wide_mug", Mug, [0.10, 0.10, 0.09], "ckhm"),
    arch("tall_glass", Receptacle, [0.07, 0.07, 0.12], "ckm"),
    arch("small_pot", Receptacle, [0.20, 0.20, 0.12], "ckm"),
    arch("teaspoon", Stirrer, [0.03, 0.14, 0.02], "m"),
    arch("long_spoon", Stirrer, [0.03, 0.26, 0.02], "m"),
    arch("ladle", Stirrer, [0.07, 0.38, 0.06], "m"),
    arch("chopstick", Stirrer, [0.015, 0.20, 0.015], "m"),
    arch("water", Liquid, [0.04, 0.04, 0.05], "q"),
    arch("juice", Liquid, [0.045, 0.045, 0.04], "q"),
    arch("milk", Liquid, [0.04, 0.04, 0.06], "q"),
    arch("coffee", Liquid, [0.05, 0.05, 0.04], "q"),
    arch("tea", Liquid, [0.035, 0.035, 0.05], "q"),
    arch("book", Flat, [0.20, 0.28, 0.04], "bm"),
    arch("magazine", Flat, [0.21, 0.28, 0.01], "bm"),
    arch("tray", Flat, [0.30, 0.40, 0.03], "bm"),
    arch("cutting_board", Flat, [0.25, 0.35, 0.02], "bm"),
    arch("whisk", Stirrer, [0.06, 0.32, 0.06], "m"),
    arch("wooden_table", Table, [1.2, 0.8, 0.75], "bs"),
    arch("round_table", Table, [1.0, 1.0, 0.72], "cs"),
    arch("long_table", Table, [1.6, 0.9, 0.78], "bs"),
    arch("tall_shelf", Shelf, [1.0, 0.4, 1.8], "bsS"),
    arch("low_shelf", Shelf, [0.8, 0.35, 1.4], "bsS"),
    arch("garbage_can", GarbageCan, [0.40, 0.40, 0.60], "ck"),
    arch("square_bin", GarbageCan, [0.45, 0.35, 0.55], "bk"),
    arch("cereal_box", Distractor, [0.20, 0.07, 0.30], "bm"),
    arch("soda_can", Distractor, [0.066, 0.066, 0.12], "cm"),
    arch("apple", Distractor, [0.08, 0.08, 0.08], "m"),
    arch("orange", Distractor, [0.075, 0.075, 0.075], "m"),
    arch("remote", Distractor, [0.05, 0.18, 0.02], "bm"),
    arch("phone", Distractor, [0.07, 0.15, 0.01], "bm"),
    arch("laptop", Distractor, [0.33, 0.23, 0.02], "bm"),
    arch("vase", Distractor, [0.10, 0.10, 0.25], "cm"),
    arch("kettle", Distractor, [0.18, 0.15, 0.22], "ckhm"),
    arch("candle", Distractor, [0.06, 0.06, 0.10], "cm"),
    arch("plant_pot", Distractor, [0.18, 0.18, 0.20], "ck"),
];

fn of_category(c: Category) -> Vec<ObjectId> {
    CATALOG.iter().enumerate().filter(|(_, a)| a.category == c).map(|(i, _)| ObjectId(i as u32 + 1)).collect()
}

pub fn archetype(id: ObjectId) -> Option<&'static Archetype> {
    CATALOG.get((id.0 as usize).checked_sub(1)?)
}

fn category(id: ObjectId) -> Option<Category> {
    archetype(id).map(|a| a.category)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | index);
    rng
}

const STREAM_ENV: u64 = 1;
const STREAM_SCENARIO: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_RECIPE: u64 = 4;

// ---------------------------------------------------------------------------
// Object roles derived purely from attributes.

fn is_stirrer(o: &ObjectState) -> bool {
    let a = &o.attributes;
    a.movable && !a.container && !a.liquid && !a.box_shape && !a.cylinder_shape && a.min_over_max < 0.35
}

/// The stirrer an expert reaches for: the longest stirrer-profile object.
pub fn choose_stirrer(state: &WorldState) -> Option<ObjectId> {
    state
        .objects
        .values()
        .filter(|o| is_stirrer(o))
        .max_by(|a, b| a.attributes.max_wl.total_cmp(&b.attributes.max_wl).then(b.id.cmp(&a.id)))
        .map(|o| o.id)
}

fn is_pour_target(o: &ObjectState) -> bool {
    let a = &o.attributes;
    a.is_open_receptacle() && a.movable && !a.handle && !a.is_garbage_can()
}

/// The empty handle-free open receptacle a POUR goes into.
pub fn choose_pour_target(state: &WorldState) -> Option<ObjectId> {
    state.objects.values().find(|o| is_pour_target(o) && o.contained_liquid.is_empty()).map(|o| o.id)
}

pub fn find_garbage_can(state: &WorldState) -> Option<ObjectId> {
    state.objects.values().find(|o| o.attributes.is_garbage_can()).map(|o| o.id)
}

fn open_surfaces(state: &WorldState) -> impl Iterator<Item = &ObjectState> {
    state.objects.values().filter(|o| o.attributes.is_open_surface() && !o.attributes.movable)
}

fn on_open_surface(state: &WorldState, id: ObjectId) -> bool {
    matches!(resting_support(state, id), Ok(Some(s)) if state.objects[&s].attributes.is_open_surface())
}

// ---------------------------------------------------------------------------
// Scripted expert: a reactive policy mapping (state, task) to the next action.

struct Expert<'a> {
    state: &'a WorldState,
    task: &'a TaskSpec,
}

type Step = Result<Action, String>;

impl<'a> Expert<'a> {
    fn close(&self, id: ObjectId) -> bool {
        self.state.is_close(id).unwrap_or(false)
    }

    fn held(&self) -> Option<ObjectId> {
        self.state.robot.gripper
    }

    fn support(&self, id: ObjectId) -> Option<ObjectId> {
        resting_support(self.state, id).ok().flatten()
    }

    fn nearest_open_surface(&self, prefer_close: bool) -> Option<ObjectId> {
        let [x, y] = self.state.robot.position;
        open_surfaces(self.state)
            .filter(|o| !prefer_close || self.close(o.id))
            .min_by(|a, b| {
                let da = a.footprint().distance_to_point([x, y]);
                let db = b.footprint().distance_to_point([x, y]);
                da.total_cmp(&db).then(a.id.cmp(&b.id))
            })
            .map(|o| o.id)
    }

    /// Get `obj` into the gripper.
    fn fetch(&self, obj: ObjectId) -> Step {
        if let Some(&top) = self.state.objects_on_top(obj).first() {
            if !self.close(obj) {
                return Ok(Action::unary(Primitive::MoveClose, obj));
            }
            return Ok(Action::unary(Primitive::Grasp, top));
        }
        if !self.close(obj) {
            Ok(Action::unary(Primitive::MoveClose, obj))
        } else {
            Ok(Action::unary(Primitive::Grasp, obj))
        }
    }

    /// Free the gripper of `x`, preferring `surface` when it is within reach.
    fn put_down(&self, x: ObjectId, surface: Option<ObjectId>) -> Step {
        if let Some(s) = self.support(x) {
            if self.state.objects[&s].attributes.is_open_surface() || Some(s) == surface {
                return Ok(Action::unary(Primitive::Release, x));
            }
        }
        if let Ok(Some(b)) = object_beneath(self.state, x) {
            if self.state.objects[&b].attributes.is_open_surface() {
                return Ok(Action::unary(Primitive::Release, x));
            }
        }
        let target = surface.filter(|s| self.close(*s)).or_else(|| self.nearest_open_surface(true));
        if let Some(s) = target {
            let place = Action::binary(Primitive::PlaceAbove, x, s);
            if check_preconditions(self.state, &place).is_ok() {
                return Ok(place);
            }
        }
        let far = surface.or_else(|| self.nearest_open_surface(false)).ok_or("no surface to put things on")?;
        if self.close(far) {
            return Err(format!("no room to put {x} down"));
        }
        Ok(Action::unary(Primitive::MoveClose, far))
    }

    /// Carry `obj` onto an open surface, ideally the one under `near`.
    fn relocate_to_table(&self, obj: ObjectId, near: ObjectId) -> Step {
        match self.held() {
            Some(h) if h == obj => {
                if let Some(s) = self.support(obj) {
                    if self.state.objects[&s].attributes.is_open_surface() {
                        return Ok(Action::unary(Primitive::Release, obj));
                    }
                }
                let surface = self.support(near).filter(|s| self.state.objects[s].attributes.is_open_surface());
                if let Some(s) = surface.or_else(|| self.nearest_open_surface(true)) {
                    if self.close(s) {
                        return Ok(Action::binary(Primitive::PlaceAbove, obj, s));
                    }
                }
                let dest = if surface.is_some() { near } else { self.nearest_open_surface(false).ok_or("no table")? };
                Ok(Action::unary(Primitive::MoveClose, dest))
            }
            Some(h) => self.put_down(h, None),
            None => self.fetch(obj),
        }
    }

    /// Hold `tool` over `target`, then run `finish`.
    fn tool_over(&self, tool: ObjectId, target: ObjectId, finish: Action) -> Step {
        match self.held() {
            Some(h) if h == tool => {
                if self.state.is_hovering_above(tool, target).unwrap_or(false) {
                    Ok(finish)
                } else if self.close(target) {
                    Ok(Action::binary(Primitive::HoldAbove, tool, target))
                } else {
                    Ok(Action::unary(Primitive::MoveClose, target))
                }
            }
            Some(h) => self.put_down(h, None),
            None => self.fetch(tool),
        }
    }

    fn next(&self) -> Step {
        if task_goal_satisfied(self.state, self.task).map_err(|e| e.to_string())? {
            return Ok(Action::DONE);
        }
        let (g1, g2) = (self.task.g_a1, self.task.g_a2);
        match self.task.task {
            Task::Pour | Task::PourTo => {
                let bottle = self.state.container_of(g1).ok_or("liquid has no container")?;
                let target = match self.task.task {
                    Task::Pour => choose_pour_target(self.state).ok_or("no receptacle to pour into")?,
                    _ => g2.ok_or("missing target")?,
                };
                let misplaced = match self.task.task {
                    Task::Pour => !on_open_surface(self.state, target),
                    _ => self.on_shelf(target),
                };
                if self.held() == Some(target) || misplaced {
                    return self.relocate_to_table(target, bottle);
                }
                self.tool_over(bottle, target, Action::binary(Primitive::FollowTrajPour, bottle, target))
            }
            Task::Stir => {
                let cup = self.state.container_of(g1).ok_or("liquid has no container")?;
                let stirrer = choose_stirrer(self.state).ok_or("no stirrer")?;
                if self.held() == Some(cup) || !on_open_surface(self.state, cup) {
                    return self.relocate_to_table(cup, stirrer);
                }
                self.tool_over(stirrer, cup, Action::unary(Primitive::FollowTrajCircle, cup))
            }
            Task::PickAndPlace => {
                let dest = g2.ok_or("missing destination")?;
                match self.held() {
                    Some(h) if h == g1 => {
                        if self.support(g1) == Some(dest) {
                            Ok(Action::unary(Primitive::Release, g1))
                        } else if self.close(dest) {
                            Ok(Action::binary(Primitive::PlaceAbove, g1, dest))
                        } else {
                            Ok(Action::unary(Primitive::MoveClose, dest))
                        }
                    }
                    Some(h) => {
                        let home = self.support(g1);
                        self.put_down(h, home)
                    }
                    None => self.fetch(g1),
                }
            }
            Task::ThrowAway => {
                let can = find_garbage_can(self.state).ok_or("no garbage can")?;
                self.tool_over(g1, can, Action::unary(Primitive::Release, g1))
            }
        }
    }

    fn on_shelf(&self, id: ObjectId) -> bool {
        matches!(self.support(id), Some(s) if self.state.objects[&s].attributes.is_shelf())
    }
}

/// The scripted expert's next action from an arbitrary state.
pub fn expert_next(state: &WorldState, task: &TaskSpec) -> Result<Action, CorpusError> {
    let action = Expert { state, task }.next().map_err(|message| CorpusError::Expert { task: *task, message })?;
    check_preconditions(state, &action)
        .map_err(|r| CorpusError::Expert { task: *task, message: format!("{action} blocked: {r}") })?;
    Ok(action)
}

/// Runs the expert to DONE.
pub fn expert_demonstrate(state: &WorldState, task: &TaskSpec) -> Result<Vec<Action>, CorpusError> {
    let mut s = state.clone();
    let mut steps = Vec::new();
    for _ in 0..EXPERT_HORIZON {
        let a = expert_next(&s, task)?;
        s = apply_primitive(&s, &a)?;
        steps.push(a);
        if a == Action::DONE {
            return Ok(steps);
        }
    }
    Err(CorpusError::Expert { task: *task, message: format!("no DONE within {EXPERT_HORIZON} steps") })
}

// ---------------------------------------------------------------------------
// Environment generation.

fn place_random_on(state: &mut WorldState, id: ObjectId, surface: ObjectId, rng: &mut ChaCha8Rng) -> bool {
    let (o, s) = (&state.objects[&id], &state.objects[&surface]);
    let (dims, fp, top) = (o.dims, s.footprint(), s.top());
    let margin = 0.02;
    let (lo_x, hi_x) = (fp.min[0] + dims[0] / 2.0 + margin, fp.max[0] - dims[0] / 2.0 - margin);
    let (lo_y, hi_y) = (fp.min[1] + dims[1] / 2.0 + margin, fp.max[1] - dims[1] / 2.0 - margin);
    if lo_x > hi_x || lo_y > hi_y {
        return false;
    }
    for _ in 0..50 {
        let c = [rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y), top + dims[2] / 2.0];
        // keep a small gap so neighbours neither touch nor overlap from above
        let padded = [dims[0] + 0.04, dims[1] + 0.04, dims[2]];
        if !state.box_collides(c, padded, id) {
            move_with_liquids(state, id, c);
            return true;
        }
    }
    false
}

fn move_with_liquids(state: &mut WorldState, id: ObjectId, center: [f64; 3]) {
    let obj = state.objects.get_mut(&id).expect("object exists");
    obj.center = center;
    let bottom = center[2] - obj.dims[2] / 2.0;
    for l in obj.contained_liquid.clone() {
        let liq = state.objects.get_mut(&l).expect("liquid exists");
        liq.center = [center[0], center[1], bottom + liq.dims[2] / 2.0];
    }
}

fn new_object(id: ObjectId) -> ObjectState {
    let a = archetype(id).expect("catalog id");
    // parked far outside the room until placed
    let center = [100.0 + 10.0 * id.0 as f64, 100.0, a.dims[2] / 2.0];
    ObjectState::new(id, center, a.dims, a.flags())
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T], n: usize) -> Vec<T> {
    items.choose_multiple(rng, n).copied().collect()
}

fn furniture_clear(state: &WorldState, id: ObjectId, gap: f64) -> bool {
    let o = &state.objects[&id];
    let fp = o.footprint();
    let inside = fp.min[0] >= 0.3 && fp.min[1] >= 0.3 && fp.max[0] <= ROOM - 0.3 && fp.max[1] <= ROOM - 0.3;
    inside
        && state.objects.values().filter(|p| p.id != id && p.center[0] < 50.0 && !p.attributes.movable && !p.is_liquid()).all(|p| {
            let q = p.footprint();
            let dx = (q.min[0] - fp.max[0]).max(fp.min[0] - q.max[0]);
            let dy = (q.min[1] - fp.max[1]).max(fp.min[1] - q.max[1]);
            dx.max(dy) >= gap
        })
}

/// A seeded random room with furniture, containers, liquids, stirrers and distractors.
pub fn generate_environment(config: &GeneratorConfig, index: usize) -> Result<WorldState, CorpusError> {
    let mut rng = rng_for(config.seed, STREAM_ENV, index as u64);
    for _ in 0..MAX_TRIES {
        if let Some(s) = try_environment(config, &mut rng) {
            return Ok(s);
        }
    }
    Err(CorpusError::Generation(format!("environment {index}: placement failed after {MAX_TRIES} attempts")))
}

fn try_environment(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Option<WorldState> {
    let n_tables = rng.gen_range(2..=3);
    let mut furniture = pick(rng, &of_category(Table), n_tables);
    furniture.extend(pick(rng, &of_category(Shelf), 1));
    furniture.extend(pick(rng, &of_category(GarbageCan), 1));
    let bottles = pick(rng, &of_category(Bottle), 2);
    let mut liquids = pick(rng, &of_category(Liquid), 3).into_iter();
    let receptacle = pick(rng, &of_category(Receptacle), 1);
    let mugs = pick(rng, &of_category(Mug), 2);
    let with_empty_mug = rng.gen_bool(0.5);
    let n_stirrers = rng.gen_range(2..=3);
    let stirrers = pick(rng, &of_category(Stirrer), n_stirrers);
    let n_flats = rng.gen_range(1..=2);
    let flats = pick(rng, &of_category(Flat), n_flats);
    let mut small: Vec<ObjectId> = bottles.iter().chain(&receptacle).chain(&mugs[..1]).copied().collect();
    if with_empty_mug {
        small.push(mugs[1]);
    }
    small.extend(&stirrers);
    small.extend(&flats);
    let base = furniture.len() + small.len() + 3;
    let (lo, hi) = config.objects_per_environment;
    let (dlo, dhi) = config.distractor_count;
    let d_lo = dlo.max(lo.saturating_sub(base));
    let d_hi = dhi.min(hi.saturating_sub(base));
    if d_lo > d_hi {
        return None;
    }
    let n_distractors = rng.gen_range(d_lo..=d_hi);
    small.extend(pick(rng, &of_category(Distractor), n_distractors));

    let mut objects: Vec<ObjectState> = furniture.iter().chain(&small).map(|&id| new_object(id)).collect();
    let mut fill = |container: ObjectId, objects: &mut Vec<ObjectState>| {
        let l = liquids.next().expect("three liquids");
        objects.push(new_object(l));
        objects.iter_mut().find(|o| o.id == container).expect("container").contained_liquid.push(l);
    };
    fill(bottles[0], &mut objects);
    fill(bottles[1], &mut objects);
    fill(mugs[0], &mut objects);
    let mut state = WorldState::new(objects, RobotState { position: [ROOM / 2.0, ROOM / 2.0], gripper: None }).ok()?;

    for &f in &furniture {
        let o = &state.objects[&f];
        let (w, l, h) = (o.dims[0], o.dims[1], o.dims[2]);
        let placed = (0..200).any(|_| {
            let c = [rng.gen_range(w / 2.0 + 0.3..ROOM - w / 2.0 - 0.3), rng.gen_range(l / 2.0 + 0.3..ROOM - l / 2.0 - 0.3), h / 2.0];
            state.objects.get_mut(&f).expect("furniture").center = c;
            furniture_clear(&state, f, 0.9)
        });
        if !placed {
            return None;
        }
    }
    let tables: Vec<ObjectId> = furniture.iter().copied().filter(|id| category(*id) == Some(Table)).collect();
    let shelf = furniture[n_tables];
    for &id in &small {
        let on_shelf = rng.gen_bool(0.2) && state.objects[&id].dims[2] < 0.3;
        let surface = if on_shelf { shelf } else { *tables.choose(rng).expect("tables") };
        if !place_random_on(&mut state, id, surface, rng) && !place_random_on(&mut state, id, tables[0], rng) {
            return None;
        }
    }
    let container_on_table = small.iter().any(|id| state.objects[id].attributes.container && on_open_surface(&state, *id));
    (container_on_table && state.check_invariants().is_ok()).then_some(state)
}

// ---------------------------------------------------------------------------
// Scenario generation.

fn surfaces(state: &WorldState, cat: Category) -> Vec<ObjectId> {
    state.ids().filter(|id| category(*id) == Some(cat)).collect()
}

fn relocate(state: &mut WorldState, id: ObjectId, surface: ObjectId, rng: &mut ChaCha8Rng) -> bool {
    state.robot.gripper != Some(id) && state.objects_on_top(id).is_empty() && place_random_on(state, id, surface, rng)
}

fn ensure_on(state: &mut WorldState, id: ObjectId, cat: Category, rng: &mut ChaCha8Rng) -> bool {
    let current = resting_support(state, id).ok().flatten();
    if current.and_then(category) == Some(cat) {
        return true;
    }
    let options = surfaces(state, cat);
    let Some(&s) = options.choose(rng) else { return false };
    relocate(state, id, s, rng)
}

fn place_robot(state: &mut WorldState, rng: &mut ChaCha8Rng) -> bool {
    for _ in 0..200 {
        let p = [rng.gen_range(0.3..ROOM - 0.3), rng.gen_range(0.3..ROOM - 0.3)];
        let inside_furniture = state.objects.values().any(|o| !o.attributes.movable && !o.is_liquid() && o.footprint().distance_to_point(p) < 0.2);
        let near_movable = state.objects.values().any(|o| o.attributes.movable && o.footprint().distance_to_point(p) <= PROXIMITY + 0.2);
        if !inside_furniture && !near_movable {
            state.robot.position = p;
            return true;
        }
    }
    false
}

/// Robot starts next to a table holding `x` at carry height over it.
fn start_holding(state: &mut WorldState, x: ObjectId, rng: &mut ChaCha8Rng) -> bool {
    if !state.objects_on_top(x).is_empty() {
        return false;
    }
    let tables = surfaces(state, Table);
    let t = &state.objects[tables.choose(rng).expect("tables")];
    let fp = t.footprint();
    let p = [rng.gen_range(fp.min[0] + 0.1..fp.max[0] - 0.1), rng.gen_range(fp.min[1] + 0.1..fp.max[1] - 0.1)];
    let dims = state.objects[&x].dims;
    let under = state
        .objects
        .values()
        .filter(|o| o.id != x && !o.is_liquid() && o.center[0] < 50.0)
        .filter(|o| o.footprint().overlap_area(&crate::world::Rect::centered(p, dims[0], dims[1])) > 0.0)
        .map(|o| o.top())
        .fold(0.0, f64::max);
    let z = under.max(CARRY_HEIGHT) + dims[2] / 2.0;
    move_with_liquids(state, x, [p[0], p[1], z]);
    state.robot.position = p;
    state.robot.gripper = Some(x);
    state.check_invariants().is_ok()
}

fn movable_solids(state: &WorldState, pred: impl Fn(&ObjectState) -> bool) -> Vec<ObjectId> {
    state.objects.values().filter(|o| o.attributes.movable && !o.is_liquid() && pred(o)).map(|o| o.id).collect()
}

fn centroid_distance(state: &WorldState, a: ObjectId, b: ObjectId) -> f64 {
    let (p, q) = (state.objects[&a].center, state.objects[&b].center);
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Task-specific arrangement of an environment; returns the task and the
/// object the expert manipulates first (held-start candidate).
fn arrange(state: &mut WorldState, task: Task, rng: &mut ChaCha8Rng) -> Option<(TaskSpec, ObjectId)> {
    match task {
        Task::Pour | Task::PourTo => {
            let bottles = surfaces(state, Bottle);
            let bottle = *bottles.choose(rng)?;
            let liquid = *state.objects[&bottle].contained_liquid.first()?;
            let target = if task == Task::Pour {
                choose_pour_target(state)?
            } else {
                let empties: Vec<ObjectId> = state
                    .objects
                    .values()
                    .filter(|o| matches!(category(o.id), Some(Mug | Receptacle)) && o.contained_liquid.is_empty())
                    .map(|o| o.id)
                    .collect();
                *empties.choose(rng)?
            };
            if task == Task::PourTo && rng.gen_bool(0.5) {
                if !ensure_on(state, target, Shelf, rng) || !ensure_on(state, bottle, Table, rng) {
                    return None;
                }
            } else if !ensure_on(state, target, Table, rng) {
                return None;
            }
            let g2 = (task == Task::PourTo).then_some(target);
            Some((TaskSpec::new(task, liquid, g2).ok()?, bottle))
        }
        Task::Stir => {
            let mug = state.objects.values().find(|o| category(o.id) == Some(Mug) && !o.contained_liquid.is_empty())?.id;
            let liquid = state.objects[&mug].contained_liquid[0];
            let stirrer = choose_stirrer(state)?;
            if rng.gen_bool(0.5) {
                if !ensure_on(state, mug, Shelf, rng) || !ensure_on(state, stirrer, Table, rng) {
                    return None;
                }
            } else if !ensure_on(state, mug, Table, rng) {
                return None;
            }
            Some((TaskSpec::new(Task::Stir, liquid, None).ok()?, stirrer))
        }
        Task::PickAndPlace => {
            let options = movable_solids(state, |o| o.contained_liquid.is_empty() && o.dims[2] < 0.3);
            let a = *options.choose(rng)?;
            let mut dests = surfaces(state, Table);
            dests.extend(surfaces(state, Shelf));
            dests.retain(|d| resting_support(state, a).ok().flatten() != Some(*d) && centroid_distance(state, a, *d) > 1.5);
            let b = *dests.choose(rng)?;
            if category(a) == Some(Flat) && rng.gen_bool(0.5) {
                let small = movable_solids(state, |o| {
                    o.id != a && o.dims[0] < 0.15 && o.dims[1] < 0.2 && o.contained_liquid.is_empty() && !matches!(category(o.id), Some(Flat))
                });
                let c = *small.choose(rng)?;
                if !relocate(state, c, a, rng) {
                    return None;
                }
            }
            Some((TaskSpec::new(Task::PickAndPlace, a, Some(b)).ok()?, a))
        }
        Task::ThrowAway => {
            let options = movable_solids(state, |o| !o.attributes.container && o.dims[2] < 0.3 && o.dims[0].max(o.dims[1]) < 0.3);
            let a = *options.choose(rng)?;
            Some((TaskSpec::new(Task::ThrowAway, a, None).ok()?, a))
        }
    }
}

/// One scenario: arranged environment, robot start, and expert demonstration.
pub fn generate_scenario(config: &GeneratorConfig, environments: &[WorldState], index: usize) -> Result<SequenceExample, CorpusError> {
    let mut rng = rng_for(config.seed, STREAM_SCENARIO, index as u64);
    let env = index % environments.len();
    let task = config.tasks[index % config.tasks.len()];
    for _ in 0..MAX_TRIES {
        let mut state = environments[env].clone();
        let Some((spec, first)) = arrange(&mut state, task, &mut rng) else { continue };
        let ok = if rng.gen_bool(HELD_START_RATE) {
            let holdable = movable_solids(&state, |o| o.dims[2] < 0.35 && o.id != spec.g_a1 || o.id == first);
            let x = if rng.gen_bool(0.5) { Some(first) } else { holdable.choose(&mut rng).copied() };
            x.map_or(false, |x| state.objects[&x].attributes.movable && start_holding(&mut state, x, &mut rng))
        } else {
            place_robot(&mut state, &mut rng)
        };
        if !ok || state.check_invariants().is_err() || task_goal_satisfied(&state, &spec)? {
            continue;
        }
        let Ok(steps) = expert_demonstrate(&state, &spec) else { continue };
        let example = SequenceExample {
            scenario_id: format!("s{index:03}"),
            environment_id: format!("env{env:02}"),
            task: spec,
            initial_state: state,
            steps,
        };
        if example.validate().is_ok() {
            return Ok(example);
        }
    }
    Err(CorpusError::Generation(format!("scenario {index}: no valid demonstration after {MAX_TRIES} attempts")))
}

/// The full demonstration corpus.
pub fn generate_corpus(config: &GeneratorConfig) -> Result<Vec<SequenceExample>, CorpusError> {
    let environments: Vec<WorldState> =
        (0..config.n_environments).into_par_iter().map(|i| generate_environment(config, i)).collect::<Result<_, _>>()?;
    (0..config.n_scenarios).into_par_iter().map(|i| generate_scenario(config, &environments, i)).collect()
}

// ---------------------------------------------------------------------------
// Attribute noise.

/// Flips every binary attribute of every object independently with probability `p`.
pub fn perturb_state(state: &WorldState, p: f64, rng: &mut impl Rng) -> WorldState {
    let mut out = state.clone();
    for obj in out.objects.values_mut() {
        let mut flags = obj.attributes.flags();
        for f in &mut flags {
            if rng.gen_bool(p) {
                *f = !*f;
            }
        }
        obj.attributes.set_flags(flags);
    }
    out
}

pub fn perturb_attributes(corpus: &[SequenceExample], flip_probability: f64, seed: u64) -> Vec<SequenceExample> {
    let p = flip_probability.clamp(0.0, 1.0);
    corpus
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = rng_for(seed, STREAM_NOISE, i as u64);
            SequenceExample { initial_state: perturb_state(&ex.initial_state, p, &mut rng), ..ex.clone() }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization.

#[derive(Serialize, Deserialize)]
struct StepRecord {
    primitive: Primitive,
    a1: Option<ObjectId>,
    a2: Option<ObjectId>,
}

#[derive(Serialize, Deserialize)]
struct EnvironmentRecord {
    objects: Vec<ObjectState>,
    robot: RobotState,
}

#[derive(Serialize, Deserialize)]
struct Record {
    format_version: u32,
    scenario_id: String,
    environment_id: String,
    task: Task,
    task_args: [Option<ObjectId>; 2],
    environment: EnvironmentRecord,
    steps: Vec<StepRecord>,
}

pub fn example_to_json(ex: &SequenceExample) -> String {
    let rec = Record {
        format_version: FORMAT_VERSION,
        scenario_id: ex.scenario_id.clone(),
        environment_id: ex.environment_id.clone(),
        task: ex.task.task,
        task_args: [Some(ex.task.g_a1), ex.task.g_a2],
        environment: EnvironmentRecord {
            objects: ex.initial_state.objects.values().cloned().collect(),
            robot: ex.initial_state.robot.clone(),
        },
        steps: ex.steps.iter().map(|a| StepRecord { primitive: a.primitive, a1: a.a1, a2: a.a2 }).collect(),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

pub fn example_from_json(text: &str, line: usize) -> Result<SequenceExample, CorpusError> {
    let parse = |message: String| CorpusError::Parse { line, message };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| parse("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CorpusError::Version { line, found: version as u32 });
    }
    let rec: Record = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
    let g_a1 = rec.task_args[0].ok_or_else(|| parse("task_args[0] is null".into()))?;
    let task = TaskSpec::new(rec.task, g_a1, rec.task_args[1]).map_err(|e| parse(e.to_string()))?;
    let initial_state = WorldState::new(rec.environment.objects, rec.environment.robot).map_err(|e| parse(e.to_string()))?;
    let steps = rec
        .steps
        .into_iter()
        .map(|s| {
            let a = Action { primitive: s.primitive, a1: s.a1, a2: s.a2 };
            if a.is_well_formed() {
                Ok(a)
            } else {
                Err(parse(format!("malformed action {a}")))
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(SequenceExample { scenario_id: rec.scenario_id, environment_id: rec.environment_id, task, initial_state, steps })
}

pub fn write_corpus(corpus: &[SequenceExample], mut out: impl Write) -> std::io::Result<()> {
    for ex in corpus {
        writeln!(out, "{}", example_to_json(ex))?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &[SequenceExample], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_corpus(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_corpus(input: impl BufRead) -> Result<Vec<SequenceExample>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(example_from_json(&line, i + 1)?);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SequenceExample>, CorpusError> {
    read_corpus(BufReader::new(fs::File::open(path)?))
}

// ---------------------------------------------------------------------------
// Recipes: several tasks chained in one scene.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    ServeSweetTea,
    CoffeeWithMilk,
    EmptyAndThrow,
    ServeAndStore,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::ServeSweetTea, Recipe::CoffeeWithMilk, Recipe::EmptyAndThrow, Recipe::ServeAndStore];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::ServeSweetTea => "serve-sweet-tea",
            Recipe::CoffeeWithMilk => "coffee-with-milk",
            Recipe::EmptyAndThrow => "empty-and-throw",
            Recipe::ServeAndStore => "serve-and-store",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecipeScenario {
    pub scenario_id: String,
    pub recipe: Recipe,
    pub initial_state: WorldState,
    pub tasks: Vec<TaskSpec>,
}

/// Runs the expert over every task in order, threading the state through.
pub fn expert_chain(initial: &WorldState, tasks: &[TaskSpec]) -> Result<Vec<Action>, CorpusError> {
    let mut state = initial.clone();
    let mut trace = Vec::new();
    for t in tasks {
        for a in expert_demonstrate(&state, t)? {
            state = apply_primitive(&state, &a)?;
            trace.push(a);
        }
        if !task_goal_satisfied(&state, t)? {
            return Err(CorpusError::Expert { task: *t, message: "goal not reached in chain".into() });
        }
    }
    Ok(trace)
}

fn recipe_tasks(state: &mut WorldState, recipe: Recipe, rng: &mut ChaCha8Rng) -> Option<Vec<TaskSpec>> {
    let bottles = surfaces(state, Bottle);
    let b1 = *bottles.first()?;
    let b2 = *bottles.get(1)?;
    let l1 = state.objects[&b1].contained_liquid[0];
    let l2 = state.objects[&b2].contained_liquid[0];
    let cup = choose_pour_target(state)?;
    for id in [b1, b2, cup] {
        if !ensure_on(state, id, Table, rng) {
            return None;
        }
    }
    let spec = |t, a, b| TaskSpec::new(t, a, b).ok();
    match recipe {
        Recipe::ServeSweetTea => Some(vec![spec(Task::Pour, l1, None)?, spec(Task::PourTo, l2, Some(cup))?, spec(Task::Stir, l1, None)?]),
        Recipe::CoffeeWithMilk => {
            let mug = state.objects.values().find(|o| category(o.id) == Some(Mug) && o.contained_liquid.is_empty())?.id;
            if !ensure_on(state, mug, Table, rng) {
                return None;
            }
            Some(vec![spec(Task::PourTo, l1, Some(mug))?, spec(Task::PourTo, l2, Some(mug))?])
        }
        Recipe::EmptyAndThrow => Some(vec![spec(Task::Pour, l1, None)?, spec(Task::ThrowAway, b1, None)?]),
        Recipe::ServeAndStore => {
            let shelf = *surfaces(state, Shelf).first()?;
            Some(vec![spec(Task::Pour, l1, None)?, spec(Task::PickAndPlace, b1, Some(shelf))?])
        }
    }
}

/// Four recipes in three environments each.
pub fn generate_recipe_suite(seed: u64) -> Result<Vec<RecipeScenario>, CorpusError> {
    let config = GeneratorConfig { seed: seed ^ 0x5eed_0fca_11ed, ..GeneratorConfig::default() };
    let mut out = Vec::new();
    for (r, recipe) in Recipe::ALL.iter().enumerate() {
        for e in 0..3 {
            let index = r * 3 + e;
            let mut rng = rng_for(seed, STREAM_RECIPE, index as u64);
            let mut made = None;
            for attempt in 0..MAX_TRIES {
                let env_index = 1000 + index * MAX_TRIES + attempt;
                let Ok(mut state) = generate_environment(&config, env_index) else { continue };
                let Some(tasks) = recipe_tasks(&mut state, *recipe, &mut rng) else { continue };
                if !place_robot(&mut state, &mut rng) || state.check_invariants().is_err() {
                    continue;
                }
                if tasks.iter().any(|t| task_goal_satisfied(&state, t).unwrap_or(true)) {
                    continue;
                }
                if expert_chain(&state, &tasks).is_ok() {
                    made = Some(RecipeScenario { scenario_id: format!("r{index:02}"), recipe: *recipe, initial_state: state, tasks });
                    break;
                }
            }
            out.push(made.ok_or_else(|| CorpusError::Generation(format!("recipe scenario {index}")))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_ids_and_profiles() {
        assert_eq!(archetype(ObjectId(16)).unwrap().name, "water");
        assert_eq!(archetype(ObjectId(2)).unwrap().category, Receptacle);
        let a = crate::world::AttributeVector::from_dims(CATALOG[30].dims, CATALOG[30].flags());
        assert!(a.is_garbage_can());
        for (i, c) in CATALOG.iter().enumerate() {
            let a = crate::world::AttributeVector::from_dims(c.dims, c.flags());
            assert_eq!(a.is_garbage_can(), c.category == GarbageCan, "{}", c.name);
            if c.category == Bottle {
                assert!(!a.is_open_receptacle(), "{}", c.name);
            }
            if c.category == Receptacle {
                assert!(a.is_open_receptacle(), "{}", c.name);
            }
            let o = ObjectState::new(ObjectId(i as u32 + 1), [0.0; 3], c.dims, c.flags());
            assert_eq!(is_stirrer(&o), c.category == Stirrer, "{}", c.name);
        }
    }

    #[test]
    fn environment_is_deterministic_and_valid() {
        let cfg = GeneratorConfig::default();
        let a = generate_environment(&cfg, 3).unwrap();
        let b = generate_environment(&cfg, 3).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        assert!((15..=25).contains(&a.objects.len()), "{}", a.objects.len());
    }

    #[test]
    fn json_roundtrip_and_errors() {
        let cfg = GeneratorConfig { n_scenarios: 5, ..GeneratorConfig::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let back = read_corpus(&buf[..]).unwrap();
        assert_eq!(back, corpus);
        let text = String::from_utf8(buf).unwrap();
        let truncated = &text[..text.len() - 40];
        match read_corpus(truncated.as_bytes()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(read_corpus(bumped.as_bytes()), Err(CorpusError::Version { line: 1, found: 9 })));
    }
}
