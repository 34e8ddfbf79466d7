//! Declarative supervision graphs: node/edge specs, validation, the
//! shipped presets, and instantiation into runnable network handles with
//! loss wiring.

use ndarray::{Array2, ArrayView4};

use crate::backbones::{cnn::CnnConfig, cnn::UNet, vit::AttentionConfig, vit::VitNet, Net, NetKind};
use crate::error::{Error, Result};
use crate::nn::init::derive;
use crate::semi::{ema_update, EmaState, NetworkHandle, Prediction, Role};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub arch: NetKind,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    /// Cross pseudo supervision: argmax labels of `src` train `dst`.
    Cps,
    /// Weight averaging: `dst` tracks an exponential moving average of
    /// `src` and receives no gradients.
    Ema,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EdgeSpec {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
}

/// A supervision graph: which networks exist, who supervises whom and
/// how, and which node is evaluated.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameworkSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
    pub test_node: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

impl FrameworkSpec {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| "unnamed".to_string())
    }

    fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Checks every structural invariant; an empty list means the spec
    /// is runnable.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |subject: &str, message: String| {
            v.push(Violation { subject: subject.to_string(), message });
        };
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.is_empty() {
                push(&format!("node #{i}"), "empty id".into());
            }
            if self.nodes[..i].iter().any(|m| m.id == n.id) {
                push(&n.id, "duplicate node id".into());
            }
        }
        if !self.nodes.iter().any(|n| n.role == Role::Learner) {
            push("graph", "no learner node".into());
        }
        if self.node(&self.test_node).is_none() {
            push(&self.test_node, "test node is not a declared node".into());
        }
        for (i, e) in self.edges.iter().enumerate() {
            let subject = format!("edge #{i} ({} -> {})", e.src, e.dst);
            let (src, dst) = (self.node(&e.src), self.node(&e.dst));
            if src.is_none() || dst.is_none() {
                push(&subject, "endpoint is not a declared node".into());
                continue;
            }
            let (src, dst) = (src.unwrap(), dst.unwrap());
            if e.src == e.dst {
                push(&subject, "self supervision is not a defined mode".into());
            }
            if self.edges[..i].iter().any(|o| o == e) {
                push(&subject, "duplicate edge".into());
            }
            match e.kind {
                EdgeKind::Cps => {
                    if dst.role != Role::Learner {
                        push(&subject, "pseudo labels can only train a learner".into());
                    }
                }
                EdgeKind::Ema => {
                    if src.role != Role::Learner {
                        push(&subject, "averaging source must be a learner".into());
                    }
                    if dst.role != Role::Teacher {
                        push(&subject, "averaging target must be a teacher".into());
                    }
                    if src.arch != dst.arch {
                        push(
                            &subject,
                            format!("arch mismatch: {} vs {}", src.arch, dst.arch),
                        );
                    }
                }
            }
        }
        for n in self.nodes.iter().filter(|n| n.role == Role::Teacher) {
            let incoming = self
                .edges
                .iter()
                .filter(|e| e.kind == EdgeKind::Ema && e.dst == n.id)
                .count();
            if incoming != 1 {
                push(&n.id, format!("teacher needs exactly one averaging source, has {incoming}"));
            }
        }
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            return Ok(());
        }
        Err(Error::InvalidSpec(v.iter().map(|x| x.to_string()).collect()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("spec serialization: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(format!("framework spec: {e}")))
    }
}

pub fn node(id: &str, arch: NetKind, role: Role) -> NodeSpec {
    NodeSpec { id: id.to_string(), arch, role }
}

pub fn edge(src: &str, dst: &str, kind: EdgeKind) -> EdgeSpec {
    EdgeSpec { src: src.to_string(), dst: dst.to_string(), kind }
}

fn learner_pair(arch: NetKind, test: &str, name: &str) -> FrameworkSpec {
    FrameworkSpec {
        name: Some(name.to_string()),
        nodes: vec![
            node("net_a", arch, Role::Learner),
            node("net_b", arch, Role::Learner),
        ],
        edges: vec![
            edge("net_a", "net_b", EdgeKind::Cps),
            edge("net_b", "net_a", EdgeKind::Cps),
        ],
        test_node: test.to_string(),
    }
}

fn teacher_pair(arch: NetKind, test: &str, name: &str) -> FrameworkSpec {
    FrameworkSpec {
        name: Some(name.to_string()),
        nodes: vec![
            node("net_b", arch, Role::Learner),
            node("net_c", arch, Role::Teacher),
        ],
        edges: vec![
            edge("net_b", "net_c", EdgeKind::Ema),
            edge("net_c", "net_b", EdgeKind::Cps),
        ],
        test_node: test.to_string(),
    }
}

fn triple(a: NetKind, b: NetKind, test: &str, name: &str) -> FrameworkSpec {
    FrameworkSpec {
        name: Some(name.to_string()),
        nodes: vec![
            node("net_a", a, Role::Learner),
            node("net_b", b, Role::Learner),
            node("net_c", b, Role::Teacher),
        ],
        edges: vec![
            edge("net_a", "net_b", EdgeKind::Cps),
            edge("net_b", "net_a", EdgeKind::Cps),
            edge("net_b", "net_c", EdgeKind::Ema),
            edge("net_c", "net_b", EdgeKind::Cps),
            edge("net_c", "net_a", EdgeKind::Cps),
        ],
        test_node: test.to_string(),
    }
}

fn solo(arch: NetKind, name: &str) -> FrameworkSpec {
    FrameworkSpec {
        name: Some(name.to_string()),
        nodes: vec![node("net_a", arch, Role::Learner)],
        edges: vec![],
        test_node: "net_a".to_string(),
    }
}

/// The ablation-grid presets, in canonical row order: two co-trained
/// learners, learner+teacher pairs, then full triples, each evaluated at
/// every network position.
pub const GRID_PRESETS: [&str; 17] = [
    "vit-vit-a",
    "vit-vit-b",
    "cnn-cnn-a",
    "cnn-cnn-b",
    "mt-cnn-b",
    "mt-cnn-c",
    "mt-vit-b",
    "mt-vit-c",
    "vit-vit-vit-a",
    "vit-vit-vit-b",
    "vit-vit-vit-c",
    "cnn-cnn-cnn-a",
    "cnn-cnn-cnn-b",
    "cnn-cnn-cnn-c",
    "cnn-vit-vit-a",
    "cnn-vit-vit-b",
    "cnn-vit-vit-c",
];

/// Supervised single-network baselines (labeled data only).
pub const EXTRA_PRESETS: [&str; 2] = ["cnn-sup", "vit-sup"];

pub fn preset_names() -> Vec<&'static str> {
    GRID_PRESETS.iter().chain(EXTRA_PRESETS.iter()).copied().collect()
}

/// Builds a shipped preset by name (case-insensitive). `w` is the
/// flagship dual-view framework tested on its teacher, `d` the classic
/// mean-teacher pair, `cnn-cnn-cps` plain CNN co-training.
pub fn preset(name: &str) -> Result<FrameworkSpec> {
    use NetKind::{Cnn, Vit};
    let key = name.to_ascii_lowercase();
    let canonical = match key.as_str() {
        "w" => "cnn-vit-vit-c",
        "d" => "mt-cnn-c",
        "cnn-cnn-cps" => "cnn-cnn-b",
        other => other,
    };
    let spec = match canonical {
        "vit-vit-a" => learner_pair(Vit, "net_a", canonical),
        "vit-vit-b" => learner_pair(Vit, "net_b", canonical),
        "cnn-cnn-a" => learner_pair(Cnn, "net_a", canonical),
        "cnn-cnn-b" => learner_pair(Cnn, "net_b", canonical),
        "mt-cnn-b" => teacher_pair(Cnn, "net_b", canonical),
        "mt-cnn-c" => teacher_pair(Cnn, "net_c", canonical),
        "mt-vit-b" => teacher_pair(Vit, "net_b", canonical),
        "mt-vit-c" => teacher_pair(Vit, "net_c", canonical),
        "vit-vit-vit-a" => triple(Vit, Vit, "net_a", canonical),
        "vit-vit-vit-b" => triple(Vit, Vit, "net_b", canonical),
        "vit-vit-vit-c" => triple(Vit, Vit, "net_c", canonical),
        "cnn-cnn-cnn-a" => triple(Cnn, Cnn, "net_a", canonical),
        "cnn-cnn-cnn-b" => triple(Cnn, Cnn, "net_b", canonical),
        "cnn-cnn-cnn-c" => triple(Cnn, Cnn, "net_c", canonical),
        "cnn-vit-vit-a" => triple(Cnn, Vit, "net_a", canonical),
        "cnn-vit-vit-b" => triple(Cnn, Vit, "net_b", canonical),
        "cnn-vit-vit-c" => triple(Cnn, Vit, "net_c", canonical),
        "cnn-sup" => solo(Cnn, canonical),
        "vit-sup" => solo(Vit, canonical),
        _ => {
            return Err(Error::Argument(format!(
                "unknown preset {name}; available: {}, plus aliases w, d, cnn-cnn-cps",
                preset_names().join(", ")
            )))
        }
    };
    Ok(spec)
}

/// Network construction parameters shared by every node of an assembly.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NetsConfig {
    pub cnn: CnnConfig,
    pub vit: AttentionConfig,
    pub num_classes: usize,
    pub alpha_cap: f64,
}

impl Default for NetsConfig {
    fn default() -> Self {
        NetsConfig {
            cnn: CnnConfig::default(),
            vit: AttentionConfig::default(),
            num_classes: 4,
            alpha_cap: 0.99,
        }
    }
}

/// One supervised loss slot (index into the assembly's handles).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupTerm {
    pub learner: usize,
}

/// One consistency slot: pseudo labels of `src` train `dst`. Terms with
/// a teacher source are weighted by λ2, learner-to-learner terms by λ1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemiTerm {
    pub src: usize,
    pub dst: usize,
    pub teacher_sourced: bool,
}

/// One weight-averaging binding with its step state.
#[derive(Debug)]
pub struct EmaBinding {
    pub student: usize,
    pub teacher: usize,
    pub state: EmaState,
}

/// A runnable framework: constructed networks plus the loss and
/// averaging wiring derived from the spec.
pub struct Assembly {
    pub spec: FrameworkSpec,
    pub handles: Vec<NetworkHandle>,
    pub sup_terms: Vec<SupTerm>,
    pub semi_terms: Vec<SemiTerm>,
    pub ema_bindings: Vec<EmaBinding>,
    pub test_index: usize,
}

fn teacher_student_mut(
    handles: &mut [NetworkHandle],
    teacher: usize,
    student: usize,
) -> (&mut NetworkHandle, &NetworkHandle) {
    debug_assert_ne!(teacher, student);
    if teacher < student {
        let (l, r) = handles.split_at_mut(student);
        (&mut l[teacher], &r[0])
    } else {
        let (l, r) = handles.split_at_mut(teacher);
        (&mut r[0], &l[student])
    }
}

impl Assembly {
    pub fn handle_index(&self, id: &str) -> Option<usize> {
        self.handles.iter().position(|h| h.id == id)
    }

    /// (supervised, learner-consistency, teacher-consistency) term counts.
    pub fn term_multiplicities(&self) -> (usize, usize, usize) {
        let l1 = self.semi_terms.iter().filter(|t| !t.teacher_sourced).count();
        let l2 = self.semi_terms.len() - l1;
        (self.sup_terms.len(), l1, l2)
    }

    pub fn forward(
        &mut self,
        batch: &crate::data::SegBatch,
        perturb_strength: f64,
        seed: u64,
    ) -> Result<Vec<Prediction>> {
        crate::semi::forward_all(batch, &mut self.handles, perturb_strength, seed)
    }

    /// Advances every teacher one averaging step toward its student.
    pub fn ema_step(&mut self) -> Result<()> {
        for b in &mut self.ema_bindings {
            let (teacher, student) = teacher_student_mut(&mut self.handles, b.teacher, b.student);
            ema_update(&mut teacher.net, &student.net, &mut b.state)?;
        }
        Ok(())
    }

    /// Inference on the designated test node: argmax label maps, one per
    /// batch item.
    pub fn predict(&self, images: &ArrayView4<'_, f64>) -> Result<Vec<Array2<u8>>> {
        let logits = self.handles[self.test_index].net.forward_eval(images)?;
        let labels = crate::semi::pseudo_label(&logits.view());
        Ok(labels
            .outer_iter()
            .map(|m| m.to_owned())
            .collect())
    }
}

/// Builds the networks (one derived init stream per node id), copies each
/// teacher from its averaging source, and wires the loss terms: one
/// supervised term per learner and one consistency term per pseudo-label
/// edge.
pub fn instantiate(spec: &FrameworkSpec, cfg: &NetsConfig, seed: u64) -> Result<Assembly> {
    spec.ensure_valid()?;
    let mut handles = Vec::with_capacity(spec.nodes.len());
    for n in &spec.nodes {
        let rng = &mut derive(seed, &format!("init:{}", n.id));
        let net = match n.arch {
            NetKind::Cnn => Net::Cnn(UNet::new(cfg.cnn, cfg.num_classes, rng)?),
            NetKind::Vit => Net::Vit(VitNet::new(cfg.vit.clone(), cfg.num_classes, rng)?),
        };
        let ema_source = spec
            .edges
            .iter()
            .find(|e| e.kind == EdgeKind::Ema && e.dst == n.id)
            .map(|e| e.src.clone());
        handles.push(NetworkHandle {
            id: n.id.clone(),
            role: n.role,
            net,
            ema_source,
        });
    }
    let ids: Vec<String> = handles.iter().map(|h| h.id.clone()).collect();
    let index_of = |id: &str| ids.iter().position(|h| h == id).unwrap();

    let mut ema_bindings = Vec::new();
    for e in spec.edges.iter().filter(|e| e.kind == EdgeKind::Ema) {
        let (student, teacher) = (index_of(&e.src), index_of(&e.dst));
        // teachers start as exact copies of their source
        let (t, s) = teacher_student_mut(&mut handles, teacher, student);
        ema_update(&mut t.net, &s.net, &mut EmaState::new(cfg.alpha_cap)?)?;
        ema_bindings.push(EmaBinding {
            student,
            teacher,
            state: EmaState::new(cfg.alpha_cap)?,
        });
    }

    let sup_terms = handles
        .iter()
        .enumerate()
        .filter(|(_, h)| h.role == Role::Learner)
        .map(|(i, _)| SupTerm { learner: i })
        .collect();
    let semi_terms = spec
        .edges
        .iter()
        .filter(|e| e.kind == EdgeKind::Cps)
        .map(|e| {
            let src = index_of(&e.src);
            SemiTerm {
                src,
                dst: index_of(&e.dst),
                teacher_sourced: handles[src].role == Role::Teacher,
            }
        })
        .collect();
    let test_index = index_of(&spec.test_node);
    Ok(Assembly {
        spec: spec.clone(),
        handles,
        sup_terms,
        semi_terms,
        ema_bindings,
        test_index,
    })
}

/// Position of a spec in the ablation heatmap: row = supervision mode and
/// tested slot, column = how many of the networks are CNNs. Specs outside
/// the shipped mode space return None.
pub fn grid_position(spec: &FrameworkSpec) -> Option<(usize, usize)> {
    let col = spec.nodes.iter().filter(|n| n.arch == NetKind::Cnn).count();
    if col > 3 {
        return None;
    }
    let learners: Vec<&NodeSpec> = spec.nodes.iter().filter(|n| n.role == Role::Learner).collect();
    let teachers: Vec<&NodeSpec> = spec.nodes.iter().filter(|n| n.role == Role::Teacher).collect();
    let t = &spec.test_node;
    let row = match (learners.len(), teachers.len()) {
        (2, 0) if t == &learners[0].id => 0,
        (2, 0) if t == &learners[1].id => 1,
        (1, 1) if t == &learners[0].id => 2,
        (1, 1) if t == &teachers[0].id => 3,
        (2, 1) if t == &learners[0].id => 4,
        (2, 1) if t == &learners[1].id => 5,
        (2, 1) if t == &teachers[0].id => 6,
        _ => return None,
    };
    Some((row, col))
}

pub const GRID_ROW_LABELS: [&str; 7] = [
    "pair, test first",
    "pair, test second",
    "teacher pair, test learner",
    "teacher pair, test teacher",
    "triple, test first",
    "triple, test second",
    "triple, test teacher",
];

pub const GRID_COL_LABELS: [&str; 4] = ["0 cnn", "1 cnn", "2 cnn", "3 cnn"];

/// Reference results recorded from full-scale runs (224×224 cardiac MRI,
/// 10% labeled). Kept for orientation when reading sweep output; the
/// tests never assert against them.
pub mod reference {
    /// (preset, mIOU, sensitivity, specificity) in grid-preset order.
    pub const PRESET_RESULTS: [(&str, f64, f64, f64); 17] = [
        ("vit-vit-a", 0.8034, 0.8829, 0.9720),
        ("vit-vit-b", 0.8135, 0.9036, 0.9821),
        ("cnn-cnn-a", 0.7906, 0.8832, 0.9743),
        ("cnn-cnn-b", 0.8231, 0.8967, 0.9761),
        ("mt-cnn-b", 0.7345, 0.8094, 0.9586),
        ("mt-cnn-c", 0.7660, 0.8481, 0.9585),
        ("mt-vit-b", 0.8159, 0.9032, 0.9822),
        ("mt-vit-c", 0.7359, 0.8415, 0.9716),
        ("vit-vit-vit-a", 0.8096, 0.8995, 0.9817),
        ("vit-vit-vit-b", 0.8194, 0.9078, 0.9833),
        ("vit-vit-vit-c", 0.8183, 0.9037, 0.9822),
        ("cnn-cnn-cnn-a", 0.8399, 0.9225, 0.9848),
        ("cnn-cnn-cnn-b", 0.8432, 0.9189, 0.9848),
        ("cnn-cnn-cnn-c", 0.8345, 0.9168, 0.9828),
        ("cnn-vit-vit-a", 0.8341, 0.9135, 0.9825),
        ("cnn-vit-vit-b", 0.8354, 0.9177, 0.9839),
        ("cnn-vit-vit-c", 0.8478, 0.9283, 0.9881),
    ];

    /// Flagship full metric row, in report column order
    /// (mDice, mIOU, Acc, Pre, Sen, Spe, HD, ASD).
    pub const FLAGSHIP_ROW: [f64; 8] =
        [0.9146, 0.8478, 0.9966, 0.9036, 0.9283, 0.9881, 12.5359, 0.6934];

    /// Flagship test mIOU by labeled-data ratio.
    pub const RATIO_MIOU: [(f64, f64); 8] = [
        (0.01, 0.5374),
        (0.02, 0.5479),
        (0.05, 0.7418),
        (0.10, 0.8432),
        (0.20, 0.8491),
        (0.30, 0.8604),
        (0.50, 0.8679),
        (1.00, 0.8691),
    ];

    pub fn preset_miou(name: &str) -> Option<f64> {
        PRESET_RESULTS
            .iter()
            .find(|(n, ..)| *n == name)
            .map(|&(_, miou, ..)| miou)
    }
}
