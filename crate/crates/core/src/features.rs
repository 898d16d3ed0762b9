//! Joint feature map over (task, environment, history, candidate action).
//!
//! The dense block functions (`phi_*`, [`assemble`]) define the map. The
//! [`StepFeatures`] cache evaluates the same map in sparse, decomposed form
//! for inference and training.

use sha2::{Digest, Sha256};

use crate::world::{
    aabb_overlap_topview, distance_to, in_collision, object_beneath, Action, AttributeVector, ObjectId, Primitive, Task,
    TaskSpec, WorldState,
};

const P: usize = Primitive::COUNT;
const T: usize = Task::COUNT;
const L: usize = AttributeVector::LEN;

pub const DISTANCE_CAP: f64 = 10.0;
pub const LENGTH_SCALE: f64 = 2.0;
pub const VOLUME_SCALE: f64 = 0.2;

/// A named index range of the joint feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

pub const AE1: Block = Block { name: "ae1", start: 0, len: 3 };
pub const AE2: Block = Block { name: "ae2", start: 3, len: 2 };
pub const PT: Block = Block { name: "pt", start: 5, len: T * P };
pub const AET1: Block = Block { name: "aet1", start: 45, len: 4 + 2 * L + L * T };
pub const AET2: Block = Block { name: "aet2", start: 147, len: 4 + L * T };
pub const PAE1: Block = Block { name: "pae1", start: 221, len: P };
pub const PAE2: Block = Block { name: "pae2", start: 229, len: P };
pub const PPT1: Block = Block { name: "ppt1", start: 237, len: T * P * P };
pub const PPT2: Block = Block { name: "ppt2", start: 557, len: T * P * P };
pub const PAAE: Block = Block { name: "paae", start: 877, len: P * 8 };

pub const LAYOUT: [Block; 10] = [AE1, AE2, PT, AET1, AET2, PAE1, PAE2, PPT1, PPT2, PAAE];

/// Joint feature dimension.
pub const DIM: usize = 941;

const _: () = assert!(PAAE.start + PAAE.len == DIM);

/// The layout as a text table: `name start len` per line.
pub fn layout_manifest() -> String {
    let mut out = String::from("block\tstart\tlen\n");
    for b in LAYOUT {
        out.push_str(&format!("{}\t{}\t{}\n", b.name, b.start, b.len));
    }
    out
}

/// Hex SHA-256 of [`layout_manifest`].
pub fn layout_hash() -> String {
    let digest = Sha256::digest(layout_manifest().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Previous two executed actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct History {
    pub prev1: Option<Action>,
    pub prev2: Option<Action>,
}

impl History {
    pub fn push(&self, action: Action) -> Self {
        Self { prev1: Some(action), prev2: self.prev1 }
    }

    /// History in effect before step `t` of `steps`.
    pub fn at(steps: &[Action], t: usize) -> Self {
        Self {
            prev1: t.checked_sub(1).map(|i| steps[i]),
            prev2: t.checked_sub(2).map(|i| steps[i]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointFeatureVector {
    pub values: Vec<f64>,
}

impl JointFeatureVector {
    pub fn block(&self, b: Block) -> &[f64] {
        &self.values[b.range()]
    }

    pub fn nonzeros(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// Attributes scaled into [0, 1].
pub fn normalized_attributes(a: &AttributeVector) -> [f64; L] {
    let mut v = a.to_array();
    v[0] /= LENGTH_SCALE;
    v[1] /= LENGTH_SCALE;
    v[2] /= LENGTH_SCALE;
    v[3] /= VOLUME_SCALE;
    for x in &mut v {
        *x = x.clamp(0.0, 1.0);
    }
    v
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn grasped(state: &WorldState, a: ObjectId) -> f64 {
    bit(state.is_grasped(a))
}

fn ndist(state: &WorldState, a: ObjectId) -> f64 {
    distance_to(state, a).unwrap_or(DISTANCE_CAP).min(DISTANCE_CAP) / DISTANCE_CAP
}

fn overlap(state: &WorldState, a: ObjectId, b: Option<ObjectId>) -> f64 {
    b.map_or(0.0, |b| bit(aabb_overlap_topview(state, a, b).unwrap_or(false)))
}

pub fn phi_ae(state: &WorldState, a1: Option<ObjectId>, a2: Option<ObjectId>) -> ([f64; 3], [f64; 2]) {
    let mut c1 = [0.0; 3];
    let mut c2 = [0.0; 2];
    if let Some(a) = a1 {
        c1[0] = grasped(state, a);
        c1[1] = ndist(state, a);
        if let Some(b) = a2 {
            c1[2] = bit(in_collision(state, a, b).unwrap_or(false));
        }
    }
    if let Some(b) = a2 {
        c2 = [grasped(state, b), ndist(state, b)];
    }
    (c1, c2)
}

fn aet_identity(state: &WorldState, a: ObjectId, task: &TaskSpec) -> [f64; 4] {
    [
        bit(a == task.g_a1),
        bit(Some(a) == task.g_a2),
        overlap(state, a, Some(task.g_a1)),
        overlap(state, a, task.g_a2),
    ]
}

fn attribute_task_tensor(state: &WorldState, a: ObjectId, task: Task, out: &mut [f64]) {
    let attrs = normalized_attributes(&state.objects[&a].attributes);
    for (k, v) in attrs.iter().enumerate() {
        out[k * T + task.index()] = *v;
    }
}

pub fn phi_aet(state: &WorldState, a1: Option<ObjectId>, a2: Option<ObjectId>, task: &TaskSpec) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = vec![0.0; AET1.len];
    let mut c2 = vec![0.0; AET2.len];
    if let Some(a) = a1 {
        c1[..4].copy_from_slice(&aet_identity(state, a, task));
        if let Ok(Some(below)) = object_beneath(state, a) {
            let offset = if state.is_grasped(a) { 4 } else { 4 + L };
            c1[offset..offset + L].copy_from_slice(&normalized_attributes(&state.objects[&below].attributes));
        }
        attribute_task_tensor(state, a, task.task, &mut c1[4 + 2 * L..]);
    }
    if let Some(b) = a2 {
        c2[..4].copy_from_slice(&aet_identity(state, b, task));
        attribute_task_tensor(state, b, task.task, &mut c2[4..]);
    }
    (c1, c2)
}

pub fn phi_pt(primitive: Primitive, task: Task) -> [f64; T * P] {
    let mut v = [0.0; T * P];
    v[task.index() * P + primitive.index()] = 1.0;
    v
}

pub fn phi_pae(state: &WorldState, primitive: Primitive, a: Option<ObjectId>) -> [f64; P] {
    let mut v = [0.0; P];
    if let Some(a) = a {
        v[primitive.index()] = grasped(state, a);
    }
    v
}

pub fn phi_ppt(primitive: Primitive, history: &History, task: Task) -> (Vec<f64>, Vec<f64>) {
    let one_hot = |prev: Option<Action>| {
        let mut v = vec![0.0; T * P * P];
        if let Some(prev) = prev {
            v[task.index() * P * P + prev.primitive.index() * P + primitive.index()] = 1.0;
        }
        v
    };
    (one_hot(history.prev2), one_hot(history.prev1))
}

fn same(a: Option<ObjectId>, b: Option<ObjectId>) -> bool {
    a.is_some() && a == b
}

fn paae_bits(a1: Option<ObjectId>, a2: Option<ObjectId>, history: &History) -> [bool; 8] {
    let mut bits = [false; 8];
    for (h, prev) in [history.prev1, history.prev2].into_iter().enumerate() {
        if let Some(prev) = prev {
            bits[4 * h] = same(a1, prev.a1);
            bits[4 * h + 1] = same(a1, prev.a2);
            bits[4 * h + 2] = same(a2, prev.a1);
            bits[4 * h + 3] = same(a2, prev.a2);
        }
    }
    bits
}

pub fn phi_paae(primitive: Primitive, a1: Option<ObjectId>, a2: Option<ObjectId>, history: &History) -> [f64; P * 8] {
    let mut v = [0.0; P * 8];
    for (k, b) in paae_bits(a1, a2, history).into_iter().enumerate() {
        v[primitive.index() * 8 + k] = bit(b);
    }
    v
}

/// Full joint feature vector, blocks concatenated in [`LAYOUT`] order.
pub fn assemble(state: &WorldState, task: &TaskSpec, action: &Action, history: &History) -> JointFeatureVector {
    let (ae1, ae2) = phi_ae(state, action.a1, action.a2);
    let (aet1, aet2) = phi_aet(state, action.a1, action.a2, task);
    let (ppt1, ppt2) = phi_ppt(action.primitive, history, task.task);
    let mut values = Vec::with_capacity(DIM);
    values.extend_from_slice(&ae1);
    values.extend_from_slice(&ae2);
    values.extend_from_slice(&phi_pt(action.primitive, task.task));
    values.extend_from_slice(&aet1);
    values.extend_from_slice(&aet2);
    values.extend_from_slice(&phi_pae(state, action.primitive, action.a1));
    values.extend_from_slice(&phi_pae(state, action.primitive, action.a2));
    values.extend_from_slice(&ppt1);
    values.extend_from_slice(&ppt2);
    values.extend_from_slice(&phi_paae(action.primitive, action.a1, action.a2, history));
    assert_eq!(values.len(), DIM, "feature layout mismatch");
    JointFeatureVector { values }
}

/// Sparse vector as (index, value) pairs.
pub type SparseVec = Vec<(u32, f64)>;

pub fn sparse_dot(w: &[f64], v: &[(u32, f64)]) -> f64 {
    v.iter().map(|&(i, x)| w[i as usize] * x).sum()
}

/// Per-step cache of everything the feature map needs, indexed by object
/// position in ascending id order.
#[derive(Clone, Debug)]
pub struct StepFeatures {
    pub task: TaskSpec,
    pub history: History,
    pub ids: Vec<ObjectId>,
    grasped: Vec<bool>,
    /// Primitive-independent argument-1 features (ae1 minus collision, aet1).
    base1: Vec<SparseVec>,
    /// Primitive-independent argument-2 features (ae2, aet2).
    base2: Vec<SparseVec>,
    /// History match bits per object as argument 1 (`[t-1 a1, t-1 a2, t-2 a1, t-2 a2]`).
    hist: Vec<[bool; 4]>,
    collision: Vec<Vec<bool>>,
}

impl StepFeatures {
    pub fn new(state: &WorldState, task: &TaskSpec, history: &History) -> Self {
        let ids: Vec<ObjectId> = state.ids().collect();
        let n = ids.len();
        let mut base1 = Vec::with_capacity(n);
        let mut base2 = Vec::with_capacity(n);
        let mut hist = Vec::with_capacity(n);
        for &a in &ids {
            let (ae1, _) = phi_ae(state, Some(a), None);
            let (_, ae2) = phi_ae(state, None, Some(a));
            let (aet1, aet2) = phi_aet(state, Some(a), Some(a), task);
            base1.push(sparsify(&[(AE1.start, &ae1[..2]), (AET1.start, &aet1)]));
            base2.push(sparsify(&[(AE2.start, &ae2[..]), (AET2.start, &aet2)]));
            let b = paae_bits(Some(a), None, history);
            hist.push([b[0], b[1], b[4], b[5]]);
        }
        let collision = ids
            .iter()
            .map(|&a| ids.iter().map(|&b| in_collision(state, a, b).unwrap_or(false)).collect())
            .collect();
        Self {
            task: *task,
            history: *history,
            grasped: ids.iter().map(|&a| state.is_grasped(a)).collect(),
            ids,
            base1,
            base2,
            hist,
            collision,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: ObjectId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn collides(&self, i: usize, j: usize) -> bool {
        self.collision[i][j]
    }

    /// Features that depend on the primitive alone (pt, ppt1, ppt2).
    pub fn primitive_part(&self, p: Primitive) -> SparseVec {
        let g = self.task.task.index();
        let mut v = vec![(PT.start + g * P + p.index(), 1.0)];
        if let Some(prev) = self.history.prev2 {
            v.push((PPT1.start + g * P * P + prev.primitive.index() * P + p.index(), 1.0));
        }
        if let Some(prev) = self.history.prev1 {
            v.push((PPT2.start + g * P * P + prev.primitive.index() * P + p.index(), 1.0));
        }
        v.into_iter().map(|(i, x)| (i as u32, x)).collect()
    }

    /// Features of object `i` in argument `slot` (1 or 2) under primitive `p`,
    /// excluding the pairwise collision bit.
    pub fn slot_part(&self, p: Primitive, slot: usize, i: usize) -> SparseVec {
        let (base, pae, bits) = match slot {
            1 => (&self.base1[i], PAE1.start, [0, 1, 4, 5]),
            2 => (&self.base2[i], PAE2.start, [2, 3, 6, 7]),
            _ => panic!("argument slot must be 1 or 2"),
        };
        let mut v = base.clone();
        v.extend(self.p_dependent(p, i, pae, bits));
        v
    }

    fn p_dependent(&self, p: Primitive, i: usize, pae: usize, bits: [usize; 4]) -> impl Iterator<Item = (u32, f64)> + '_ {
        let pae_entry = self.grasped[i].then_some(((pae + p.index()) as u32, 1.0));
        let paae = self.hist[i]
            .into_iter()
            .zip(bits)
            .filter(|(on, _)| *on)
            .map(move |(_, k)| ((PAAE.start + p.index() * 8 + k) as u32, 1.0));
        pae_entry.into_iter().chain(paae)
    }

    pub fn slot_score(&self, w: &[f64], p: Primitive, slot: usize, i: usize) -> f64 {
        let (base, pae, bits) = match slot {
            1 => (&self.base1[i], PAE1.start, [0, 1, 4, 5]),
            _ => (&self.base2[i], PAE2.start, [2, 3, 6, 7]),
        };
        sparse_dot(w, base) + self.p_dependent(p, i, pae, bits).map(|(k, x)| w[k as usize] * x).sum::<f64>()
    }

    /// Sparse joint feature vector of an action given by object positions.
    pub fn sparse(&self, p: Primitive, i: Option<usize>, j: Option<usize>) -> SparseVec {
        let mut v = self.primitive_part(p);
        if let Some(i) = i {
            v.extend(self.slot_part(p, 1, i));
        }
        if let Some(j) = j {
            v.extend(self.slot_part(p, 2, j));
        }
        if let (Some(i), Some(j)) = (i, j) {
            if self.collision[i][j] {
                v.push(((AE1.start + 2) as u32, 1.0));
            }
        }
        v
    }

    pub fn sparse_action(&self, action: &Action) -> SparseVec {
        let pos = |a: Option<ObjectId>| a.map(|id| self.index_of(id).expect("argument must exist in state"));
        self.sparse(action.primitive, pos(action.a1), pos(action.a2))
    }
}

fn sparsify(parts: &[(usize, &[f64])]) -> SparseVec {
    parts
        .iter()
        .flat_map(|(start, vals)| {
            vals.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(k, v)| ((start + k) as u32, *v))
        })
        .collect()
}

pub fn densify(v: &[(u32, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; DIM];
    for &(i, x) in v {
        out[i as usize] += x;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Flags, ObjectState, RobotState};

    fn scene() -> WorldState {
        let f = |s: &str| Flags {
            container: s.contains('k'),
            movable: s.contains('m'),
            large_horizontal_surface: s.contains('s'),
            box_shape: s.contains('b'),
            ..Flags::default()
        };
        let table = ObjectState::new(ObjectId(1), [5.0, 0.0, 0.375], [1.2, 0.8, 0.75], f("bs"));
        let cup = ObjectState::new(ObjectId(2), [0.0, 0.0, 1.6], [0.08, 0.08, 0.1], f("km"));
        let book = ObjectState::new(ObjectId(3), [5.2, 0.1, 0.76], [0.2, 0.3, 0.02], f("bm"));
        WorldState::new([table, cup, book], RobotState { position: [0.0, 0.0], gripper: Some(ObjectId(2)) }).unwrap()
    }

    fn task() -> TaskSpec {
        TaskSpec::new(Task::PickAndPlace, ObjectId(3), Some(ObjectId(1))).unwrap()
    }

    #[test]
    fn layout_is_contiguous() {
        let mut next = 0;
        for b in LAYOUT {
            assert_eq!(b.start, next, "{}", b.name);
            next += b.len;
        }
        assert_eq!(next, DIM);
        assert_eq!(layout_hash().len(), 64);
    }

    #[test]
    fn ae_grasped_and_distance() {
        let s = scene();
        let (c1, c2) = phi_ae(&s, Some(ObjectId(2)), Some(ObjectId(1)));
        assert_eq!(c1, [1.0, 0.0, 0.0]);
        assert_eq!(c2, [0.0, 0.5]);
        assert_eq!(phi_ae(&s, None, None), ([0.0; 3], [0.0; 2]));
    }

    #[test]
    fn ppt_and_paae_index_arithmetic() {
        let h = History::default()
            .push(Action::unary(Primitive::Grasp, ObjectId(4)))
            .push(Action::binary(Primitive::HoldAbove, ObjectId(4), ObjectId(2)));
        let (c1, c2) = phi_ppt(Primitive::FollowTrajPour, &h, Task::Pour);
        let g = Task::Pour.index();
        assert_eq!(c1.iter().position(|v| *v == 1.0), Some(g * 64 + 8 + 6));
        assert_eq!(c2.iter().position(|v| *v == 1.0), Some(g * 64 + 4 * 8 + 6));
        let v = phi_paae(Primitive::FollowTrajPour, Some(ObjectId(4)), Some(ObjectId(2)), &h);
        assert_eq!(&v[48..56], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(phi_paae(Primitive::Done, None, None, &h), [0.0; 64]);
    }

    #[test]
    fn done_without_history_only_pt() {
        let v = assemble(&scene(), &task(), &Action::DONE, &History::default());
        assert_eq!(v.nonzeros(), 1);
        assert_eq!(v.block(PT).iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn held_object_routes_below_block_one() {
        let mut s = scene();
        s.objects.get_mut(&ObjectId(2)).unwrap().center = [5.0, 0.0, 1.6];
        let (c1, _) = phi_aet(&s, Some(ObjectId(2)), None, &task());
        assert!(c1[4..4 + L].iter().any(|v| *v != 0.0));
        assert!(c1[4 + L..4 + 2 * L].iter().all(|v| *v == 0.0));
        let (c1, _) = phi_aet(&s, Some(ObjectId(3)), None, &task());
        assert!(c1[4..4 + L].iter().all(|v| *v == 0.0));
        assert_eq!(&c1[4 + L..4 + 2 * L], &normalized_attributes(&s.objects[&ObjectId(1)].attributes));
    }

    #[test]
    fn sparse_cache_matches_dense() {
        let s = scene();
        let h = History::default().push(Action::unary(Primitive::MoveClose, ObjectId(3)));
        let cache = StepFeatures::new(&s, &task(), &h);
        for a in crate::world::enumerate_actions(&s) {
            assert_eq!(densify(&cache.sparse_action(&a)), assemble(&s, &task(), &a, &h).values, "{a}");
        }
    }
}
