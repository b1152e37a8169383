//! Robot descriptions: kinematic tree, limits, collision spheres, keypoint
//! sites and gripper definitions.

use std::collections::HashMap;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use sha2::{Digest, Sha256};

use crate::desc::{self, Node, Span, SyntaxError};

/// Axis norms may deviate from 1 by at most this much before parse rejects them.
pub const AXIS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Hinge,
    Slide,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent: usize,
    pub child: usize,
    pub origin: Isometry3<f64>,
    pub axis: Vector3<f64>,
    pub lower: f64,
    pub upper: f64,
    pub vlimit: f64,
    /// Position in the joint vector, `None` for fixed joints.
    pub dof: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSphere {
    pub link: usize,
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub name: String,
    pub link: usize,
    pub offset: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GripperKind {
    ParallelJaw,
    Dexterous,
}

impl GripperKind {
    /// Number of tracking sites: thumb/index tips and inter-phalange joints
    /// for a parallel jaw, five fingertips plus the wrist for a hand.
    pub fn site_count(self) -> usize {
        match self {
            GripperKind::ParallelJaw => 4,
            GripperKind::Dexterous => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gripper {
    pub kind: GripperKind,
    /// Site indices in tracking order.
    pub sites: Vec<usize>,
    /// Joint index of the aperture actuator, if the gripper has one.
    pub aperture_joint: Option<usize>,
    pub range: (f64, f64),
}

/// Semantic error classes, each with a stable code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticCode {
    KinematicCycle,
    DanglingReference,
    DuplicateName,
    MultipleParents,
    Disconnected,
    InvalidLimits,
    NonUnitAxis,
    InvalidQuaternion,
    InvalidVelocityLimit,
    InvalidRadius,
    GripperSites,
    MissingField,
    UnknownKey,
    InvalidRange,
}

impl SemanticCode {
    pub fn code(self) -> &'static str {
        match self {
            SemanticCode::KinematicCycle => "E101",
            SemanticCode::DanglingReference => "E102",
            SemanticCode::DuplicateName => "E103",
            SemanticCode::MultipleParents => "E104",
            SemanticCode::Disconnected => "E105",
            SemanticCode::InvalidLimits => "E106",
            SemanticCode::NonUnitAxis => "E107",
            SemanticCode::InvalidQuaternion => "E108",
            SemanticCode::InvalidVelocityLimit => "E109",
            SemanticCode::InvalidRadius => "E110",
            SemanticCode::GripperSites => "E111",
            SemanticCode::MissingField => "E112",
            SemanticCode::UnknownKey => "E113",
            SemanticCode::InvalidRange => "E114",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("E100 syntax error at {0}")]
    Syntax(#[from] SyntaxError),
    #[error("{} {message} (at {span})", .code.code())]
    Semantic {
        code: SemanticCode,
        span: Span,
        message: String,
    },
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::Syntax(_) => "E100",
            ModelError::Semantic { code, .. } => code.code(),
        }
    }

    pub(crate) fn semantic(code: SemanticCode, span: Span, message: impl Into<String>) -> Self {
        ModelError::Semantic {
            code,
            span,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub spheres: Vec<CollisionSphere>,
    pub sites: Vec<Site>,
    pub grippers: Vec<Gripper>,
    /// World pose of link 0.
    pub base: Isometry3<f64>,
    /// Hex SHA-256 of the description text.
    pub hash: String,
    /// Joint indices sorted root-to-leaf.
    order: Vec<usize>,
    /// Joint index for each entry of the joint vector.
    dof_joints: Vec<usize>,
    /// Per link: dof indices of the joints between it and the root.
    chains: Vec<Vec<usize>>,
    /// Sphere index pairs subject to the self-distance check.
    pairs: Vec<(usize, usize)>,
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.dof_joints.len()
    }

    pub fn joint_order(&self) -> &[usize] {
        &self.order
    }

    /// The joint driving each dof.
    pub fn dof_joint(&self, dof: usize) -> &Joint {
        &self.joints[self.dof_joints[dof]]
    }

    pub fn dof_joint_index(&self, dof: usize) -> usize {
        self.dof_joints[dof]
    }

    pub fn lower_limits(&self) -> Vec<f64> {
        self.dof_joints.iter().map(|&j| self.joints[j].lower).collect()
    }

    pub fn upper_limits(&self) -> Vec<f64> {
        self.dof_joints.iter().map(|&j| self.joints[j].upper).collect()
    }

    pub fn velocity_limits(&self) -> Vec<f64> {
        self.dof_joints.iter().map(|&j| self.joints[j].vlimit).collect()
    }

    /// Dof indices on the path from `link` to the root.
    pub fn chain(&self, link: usize) -> &[usize] {
        &self.chains[link]
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn collision_pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Whether two links are connected directly by a joint.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.joints
            .iter()
            .any(|j| (j.parent == a && j.child == b) || (j.parent == b && j.child == a))
    }

    pub fn with_base(mut self, base: Isometry3<f64>) -> Self {
        self.base = base;
        self
    }

    /// Clamps a joint vector into the position limits.
    pub fn clamp(&self, q: &mut [f64]) {
        for (i, v) in q.iter_mut().enumerate() {
            let j = self.dof_joint(i);
            *v = v.clamp(j.lower, j.upper);
        }
    }

    /// Middle of every joint range.
    pub fn mid_configuration(&self) -> Vec<f64> {
        (0..self.dof())
            .map(|i| {
                let j = self.dof_joint(i);
                0.5 * (j.lower + j.upper)
            })
            .collect()
    }
}

/// SHA-256 hex digest of description text, used to pin episode logs to models.
pub fn description_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub(crate) fn unit_axis(v: [f64; 3], span: Span) -> Result<Vector3<f64>, ModelError> {
    let axis = Vector3::from(v);
    let norm = axis.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > AXIS_TOLERANCE {
        return Err(ModelError::semantic(
            SemanticCode::NonUnitAxis,
            span,
            format!("axis norm {norm} is not 1"),
        ));
    }
    Ok(axis / norm)
}

/// Scalar-first quaternion, normalized.
pub(crate) fn unit_quaternion(w: f64, x: f64, y: f64, z: f64, span: Span) -> Result<UnitQuaternion<f64>, ModelError> {
    let q = Quaternion::new(w, x, y, z);
    let norm = q.norm();
    if !norm.is_finite() || norm < 1e-9 {
        return Err(ModelError::semantic(
            SemanticCode::InvalidQuaternion,
            span,
            "quaternion has zero norm",
        ));
    }
    Ok(UnitQuaternion::from_quaternion(q))
}

/// `x y z qw qx qy qz` as a rigid transform.
pub(crate) fn pose7(node: &Node) -> Result<Isometry3<f64>, ModelError> {
    let [x, y, z, qw, qx, qy, qz] = node.numbers::<7>()?;
    let rot = unit_quaternion(qw, qx, qy, qz, node.span)?;
    Ok(Isometry3::from_parts(Translation3::new(x, y, z), rot))
}

pub(crate) fn unknown(node: &Node, ctx: &str) -> ModelError {
    ModelError::semantic(
        SemanticCode::UnknownKey,
        node.span,
        format!("unknown key `{}` in {ctx}", node.keyword),
    )
}

pub(crate) fn missing(span: Span, what: &str, ctx: &str) -> ModelError {
    ModelError::semantic(SemanticCode::MissingField, span, format!("{ctx} is missing `{what}`"))
}

struct JointDraft {
    name: String,
    span: Span,
    kind: Option<JointKind>,
    parent: Option<(String, Span)>,
    child: Option<(String, Span)>,
    origin: Isometry3<f64>,
    axis: Vector3<f64>,
    limits: Option<(f64, f64, Span)>,
    vlimit: Option<(f64, Span)>,
}

/// Parses a robot description document.
pub fn parse_robot(text: &str) -> Result<RobotModel, ModelError> {
    let nodes = desc::parse(text)?;
    let robots: Vec<&Node> = nodes.iter().filter(|n| n.keyword == "robot").collect();
    if let Some(other) = nodes.iter().find(|n| n.keyword != "robot") {
        return Err(unknown(other, "document"));
    }
    let robot = match robots.as_slice() {
        [r] => *r,
        [] => return Err(missing(Span { line: 1, col: 1 }, "robot", "document")),
        [_, second, ..] => {
            return Err(ModelError::semantic(
                SemanticCode::DuplicateName,
                second.span,
                "more than one robot block",
            ))
        }
    };
    let name = robot.name()?.to_string();
    let body = robot.expect_block()?;

    let mut links: Vec<Link> = Vec::new();
    let mut link_ids: HashMap<String, usize> = HashMap::new();
    let mut drafts: Vec<JointDraft> = Vec::new();
    let mut sphere_nodes = Vec::new();
    let mut site_nodes = Vec::new();
    let mut gripper_nodes = Vec::new();

    for node in body {
        match node.keyword.as_str() {
            "link" => {
                let lname = node.name()?.to_string();
                if link_ids.insert(lname.clone(), links.len()).is_some() {
                    return Err(ModelError::semantic(
                        SemanticCode::DuplicateName,
                        node.span,
                        format!("duplicate link `{lname}`"),
                    ));
                }
                if let Some(extra) = node.children().first() {
                    return Err(unknown(extra, "link"));
                }
                links.push(Link { name: lname });
            }
            "joint" => drafts.push(joint_draft(node)?),
            "sphere" => sphere_nodes.push(node),
            "site" => site_nodes.push(node),
            "gripper" => gripper_nodes.push(node),
            _ => return Err(unknown(node, "robot")),
        }
    }
    if links.is_empty() {
        return Err(missing(robot.span, "link", "robot"));
    }

    let resolve = |(lname, span): &(String, Span)| -> Result<usize, ModelError> {
        link_ids.get(lname).copied().ok_or_else(|| {
            ModelError::semantic(
                SemanticCode::DanglingReference,
                *span,
                format!("unknown link `{lname}`"),
            )
        })
    };

    let mut joints = Vec::with_capacity(drafts.len());
    let mut joint_ids: HashMap<String, usize> = HashMap::new();
    let mut dof = 0;
    for d in drafts {
        if joint_ids.insert(d.name.clone(), joints.len()).is_some() {
            return Err(ModelError::semantic(
                SemanticCode::DuplicateName,
                d.span,
                format!("duplicate joint `{}`", d.name),
            ));
        }
        let kind = d.kind.ok_or_else(|| missing(d.span, "kind", "joint"))?;
        let parent = resolve(d.parent.as_ref().ok_or_else(|| missing(d.span, "parent", "joint"))?)?;
        let child = resolve(d.child.as_ref().ok_or_else(|| missing(d.span, "child", "joint"))?)?;
        let (lower, upper, vlimit, dof_slot) = if kind == JointKind::Fixed {
            (0.0, 0.0, f64::INFINITY, None)
        } else {
            let (lo, hi, lspan) = d.limits.ok_or_else(|| missing(d.span, "limits", "joint"))?;
            if !(lo < hi) {
                return Err(ModelError::semantic(
                    SemanticCode::InvalidLimits,
                    lspan,
                    format!("joint `{}` limits require lo < hi, got {lo} >= {hi}", d.name),
                ));
            }
            let (v, vspan) = d.vlimit.ok_or_else(|| missing(d.span, "vlimit", "joint"))?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::semantic(
                    SemanticCode::InvalidVelocityLimit,
                    vspan,
                    format!("joint `{}` vlimit must be positive", d.name),
                ));
            }
            dof += 1;
            (lo, hi, v, Some(dof - 1))
        };
        joints.push(Joint {
            name: d.name,
            kind,
            parent,
            child,
            origin: d.origin,
            axis: d.axis,
            lower,
            upper,
            vlimit,
            dof: dof_slot,
        });
    }

    let spans: Vec<Span> = body.iter().filter(|n| n.keyword == "joint").map(|n| n.span).collect();
    let parent_joint = check_tree(&links, &joints, &spans)?;

    // root-to-leaf order by depth
    let mut depth = vec![usize::MAX; links.len()];
    depth[0] = 0;
    let mut order = Vec::with_capacity(joints.len());
    let mut frontier = vec![0usize];
    while let Some(link) = frontier.pop() {
        for (ji, j) in joints.iter().enumerate() {
            if j.parent == link {
                depth[j.child] = depth[link] + 1;
                order.push(ji);
                frontier.push(j.child);
            }
        }
    }
    order.sort_by_key(|&ji| (depth[joints[ji].child], ji));

    let mut chains = vec![Vec::new(); links.len()];
    for link in 0..links.len() {
        let mut cur = link;
        let mut chain = Vec::new();
        while let Some(ji) = parent_joint[cur] {
            if let Some(d) = joints[ji].dof {
                chain.push(d);
            }
            cur = joints[ji].parent;
        }
        chain.reverse();
        chains[link] = chain;
    }

    let mut dof_joints = vec![0; dof];
    for (ji, j) in joints.iter().enumerate() {
        if let Some(d) = j.dof {
            dof_joints[d] = ji;
        }
    }

    let link_of = |node: &Node, ctx: &str| -> Result<usize, ModelError> {
        let ln = node
            .children()
            .iter()
            .find(|c| c.keyword == "link")
            .ok_or_else(|| missing(node.span, "link", ctx))?;
        resolve(&(ln.word()?.to_string(), ln.args[0].span))
    };

    let mut spheres = Vec::new();
    for node in sphere_nodes {
        let link = link_of(node, "sphere")?;
        let mut center = None;
        let mut radius = None;
        for c in node.expect_block()? {
            match c.keyword.as_str() {
                "link" => {}
                "center" => center = Some(Vector3::from(c.numbers::<3>()?)),
                "radius" => {
                    let [r] = c.numbers::<1>()?;
                    if !(r > 0.0) {
                        return Err(ModelError::semantic(
                            SemanticCode::InvalidRadius,
                            c.span,
                            "sphere radius must be positive",
                        ));
                    }
                    radius = Some(r);
                }
                _ => return Err(unknown(c, "sphere")),
            }
        }
        spheres.push(CollisionSphere {
            link,
            center: center.unwrap_or_else(Vector3::zeros),
            radius: radius.ok_or_else(|| missing(node.span, "radius", "sphere"))?,
        });
    }

    let mut sites: Vec<Site> = Vec::new();
    for node in site_nodes {
        let sname = node.name()?.to_string();
        if sites.iter().any(|s| s.name == sname) {
            return Err(ModelError::semantic(
                SemanticCode::DuplicateName,
                node.span,
                format!("duplicate site `{sname}`"),
            ));
        }
        let link = link_of(node, "site")?;
        let mut offset = Vector3::zeros();
        for c in node.expect_block()? {
            match c.keyword.as_str() {
                "link" => {}
                "offset" => offset = Vector3::from(c.numbers::<3>()?),
                _ => return Err(unknown(c, "site")),
            }
        }
        sites.push(Site { name: sname, link, offset });
    }

    let mut grippers = Vec::new();
    for node in gripper_nodes {
        let mut kind = None;
        let mut gsites = None;
        let mut aperture_joint = None;
        let mut range = None;
        for c in node.expect_block()? {
            match c.keyword.as_str() {
                "kind" => {
                    kind = Some(match c.word()? {
                        "parallel_jaw" => GripperKind::ParallelJaw,
                        "dexterous" => GripperKind::Dexterous,
                        other => {
                            return Err(SyntaxError::new(c.args[0].span, format!("unknown gripper kind `{other}`")).into())
                        }
                    })
                }
                "sites" => {
                    let mut idx = Vec::new();
                    for w in &c.args {
                        let i = sites.iter().position(|s| s.name == w.text).ok_or_else(|| {
                            ModelError::semantic(
                                SemanticCode::DanglingReference,
                                w.span,
                                format!("unknown site `{}`", w.text),
                            )
                        })?;
                        idx.push(i);
                    }
                    gsites = Some((idx, c.span));
                }
                "aperture_joint" => {
                    let jn = c.word()?;
                    let ji = joint_ids.get(jn).copied().ok_or_else(|| {
                        ModelError::semantic(
                            SemanticCode::DanglingReference,
                            c.args[0].span,
                            format!("unknown joint `{jn}`"),
                        )
                    })?;
                    if joints[ji].kind == JointKind::Fixed {
                        return Err(ModelError::semantic(
                            SemanticCode::DanglingReference,
                            c.args[0].span,
                            format!("aperture joint `{jn}` is fixed"),
                        ));
                    }
                    aperture_joint = Some(ji);
                }
                "range" => {
                    let [a, b] = c.numbers::<2>()?;
                    if !(a < b) {
                        return Err(ModelError::semantic(
                            SemanticCode::InvalidLimits,
                            c.span,
                            "gripper range requires a < b",
                        ));
                    }
                    range = Some((a, b));
                }
                _ => return Err(unknown(c, "gripper")),
            }
        }
        let kind = kind.ok_or_else(|| missing(node.span, "kind", "gripper"))?;
        let (gsites, sspan) = gsites.ok_or_else(|| missing(node.span, "sites", "gripper"))?;
        if gsites.len() != kind.site_count() {
            return Err(ModelError::semantic(
                SemanticCode::GripperSites,
                sspan,
                format!(
                    "{:?} gripper needs {} tracking sites, found {}",
                    kind,
                    kind.site_count(),
                    gsites.len()
                ),
            ));
        }
        grippers.push(Gripper {
            kind,
            sites: gsites,
            aperture_joint,
            range: range.ok_or_else(|| missing(node.span, "range", "gripper"))?,
        });
    }

    let mut pairs = Vec::new();
    for a in 0..spheres.len() {
        for b in a + 1..spheres.len() {
            let (la, lb) = (spheres[a].link, spheres[b].link);
            let adjacent = joints
                .iter()
                .any(|j| (j.parent == la && j.child == lb) || (j.parent == lb && j.child == la));
            if la != lb && !adjacent {
                pairs.push((a, b));
            }
        }
    }

    Ok(RobotModel {
        name,
        links,
        joints,
        spheres,
        sites,
        grippers,
        base: Isometry3::identity(),
        hash: description_hash(text),
        order,
        dof_joints,
        chains,
        pairs,
    })
}

fn joint_draft(node: &Node) -> Result<JointDraft, ModelError> {
    let mut d = JointDraft {
        name: node.name()?.to_string(),
        span: node.span,
        kind: None,
        parent: None,
        child: None,
        origin: Isometry3::identity(),
        axis: Vector3::z(),
        limits: None,
        vlimit: None,
    };
    for c in node.expect_block()? {
        match c.keyword.as_str() {
            "kind" => {
                d.kind = Some(match c.word()? {
                    "hinge" => JointKind::Hinge,
                    "slide" => JointKind::Slide,
                    "fixed" => JointKind::Fixed,
                    other => {
                        return Err(SyntaxError::new(c.args[0].span, format!("unknown joint kind `{other}`")).into())
                    }
                })
            }
            "parent" => d.parent = Some((c.word()?.to_string(), c.args[0].span)),
            "child" => d.child = Some((c.word()?.to_string(), c.args[0].span)),
            "origin" => d.origin = pose7(c)?,
            "axis" => d.axis = unit_axis(c.numbers::<3>()?, c.span)?,
            "limits" => {
                let [lo, hi] = c.numbers::<2>()?;
                d.limits = Some((lo, hi, c.span));
            }
            "vlimit" => {
                let [v] = c.numbers::<1>()?;
                d.vlimit = Some((v, c.span));
            }
            _ => return Err(unknown(c, "joint")),
        }
    }
    Ok(d)
}

/// Verifies the joints form a tree rooted at link 0 and returns each link's parent joint.
fn check_tree(links: &[Link], joints: &[Joint], spans: &[Span]) -> Result<Vec<Option<usize>>, ModelError> {
    let mut parent_joint: Vec<Option<usize>> = vec![None; links.len()];
    for (ji, j) in joints.iter().enumerate() {
        if j.parent == j.child || j.child == 0 {
            return Err(ModelError::semantic(
                SemanticCode::KinematicCycle,
                spans[ji],
                format!("kinematic cycle through joint `{}`", j.name),
            ));
        }
        if parent_joint[j.child].replace(ji).is_some() {
            return Err(ModelError::semantic(
                SemanticCode::MultipleParents,
                spans[ji],
                format!("link `{}` has more than one parent joint", links[j.child].name),
            ));
        }
    }
    for start in 1..links.len() {
        let mut cur = start;
        let mut steps = 0;
        loop {
            match parent_joint[cur] {
                None if cur == 0 => break,
                None => {
                    return Err(ModelError::semantic(
                        SemanticCode::Disconnected,
                        Span::default(),
                        format!("link `{}` is not connected to the root", links[cur].name),
                    ))
                }
                Some(ji) => {
                    cur = joints[ji].parent;
                    steps += 1;
                    if steps > joints.len() {
                        return Err(ModelError::semantic(
                            SemanticCode::KinematicCycle,
                            spans[ji],
                            format!("kinematic cycle through joint `{}`", joints[ji].name),
                        ));
                    }
                }
            }
        }
    }
    Ok(parent_joint)
}
