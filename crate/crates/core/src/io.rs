//! Line-oriented text formats for scenes, observations, rollouts, fits,
//! reports and controller trajectories.
//!
//! Every file starts with `springtwin-<kind> <major>.<minor>`, followed by a
//! `config` line holding the effective run configuration (a JSON string,
//! possibly empty), then `key value...` records. Floats are written in their
//! shortest round-trip decimal form, so reading a file back reproduces the
//! written value bit for bit.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fit::{FitResult, ObservationSequence};
use crate::geom::{PointCloud, Vec3};
use crate::metrics::{EvalReport, ModelAnalysis};
use crate::model::{CollisionParams, MassNode, NodeKind, PhysicsConfig, Spring, SpringKind, SystemTopology};
use crate::scenegen::{Scene, SceneSpec};
use crate::sim::{ControllerTrajectory, Rollout, SimDiagnostics, SimState};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;

/// A value read from disk together with the configuration stamped into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Stamped<T> {
    pub value: T,
    pub config: String,
}

/// A value with a text file representation.
pub trait Artifact: Sized {
    /// File kind used in the header and as the conventional extension.
    const KIND: &'static str;
    fn write_body(&self, w: &mut Writer);
    fn read_body(r: &mut Reader) -> Result<Self>;
}

/// Serializes `value` with the given config stamp.
pub fn to_text<T: Artifact>(value: &T, config: &str) -> String {
    let mut w = Writer::default();
    w.line(&format!("springtwin-{} {FORMAT_MAJOR}.{FORMAT_MINOR}", T::KIND));
    w.text("config", config);
    value.write_body(&mut w);
    w.out
}

pub fn from_text<T: Artifact>(text: &str) -> Result<Stamped<T>> {
    let mut r = Reader::new(text);
    let (line, header) = r.next_line()?;
    let mut parts = header.split_whitespace();
    let expected = format!("springtwin-{}", T::KIND);
    match parts.next() {
        Some(k) if k == expected => {}
        Some(k) => return Err(Error::Schema(format!("expected {expected}, found {k}"))),
        None => return Err(Error::Parse { line, message: "missing header".into() }),
    }
    let version = parts.next().ok_or_else(|| Error::Schema("missing version".into()))?;
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok())
        .ok_or_else(|| Error::Schema(format!("bad version {version}")))?;
    if major != FORMAT_MAJOR {
        return Err(Error::Schema(format!("unsupported major version {major}")));
    }
    let config = r.text("config")?;
    let value = T::read_body(&mut r)?;
    r.finish()?;
    Ok(Stamped { value, config })
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path`.
pub fn save<T: Artifact>(path: &Path, value: &T, config: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, to_text(value, config).as_bytes())?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load<T: Artifact>(path: &Path) -> Result<Stamped<T>> {
    let text = std::fs::read_to_string(path)?;
    from_text(&text)
}

/// Record writer.
#[derive(Default)]
pub struct Writer {
    out: String,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl Writer {
    fn line(&mut self, s: &str) {
        self.out.push_str(s);
        self.out.push('\n');
    }

    pub fn f64(&mut self, key: &str, v: f64) {
        self.line(&format!("{key} {}", fmt_f64(v)));
    }

    pub fn opt_f64(&mut self, key: &str, v: Option<f64>) {
        match v {
            Some(v) => self.f64(key, v),
            None => self.line(&format!("{key} none")),
        }
    }

    pub fn usize(&mut self, key: &str, v: usize) {
        self.line(&format!("{key} {v}"));
    }

    pub fn u64(&mut self, key: &str, v: u64) {
        self.line(&format!("{key} {v}"));
    }

    pub fn bool(&mut self, key: &str, v: bool) {
        self.line(&format!("{key} {v}"));
    }

    /// Arbitrary text, JSON-quoted so it stays on one line.
    pub fn text(&mut self, key: &str, v: &str) {
        self.line(&format!("{key} {}", serde_json::to_string(v).expect("string serializes")));
    }

    pub fn vec3(&mut self, key: &str, v: &Vec3) {
        self.line(&format!("{key} {} {} {}", fmt_f64(v.x), fmt_f64(v.y), fmt_f64(v.z)));
    }

    pub fn floats(&mut self, key: &str, v: &[f64]) {
        let mut s = format!("{key} {}", v.len());
        for x in v {
            s.push(' ');
            s.push_str(&fmt_f64(*x));
        }
        self.line(&s);
    }

    pub fn indices(&mut self, key: &str, v: &[usize]) {
        let mut s = format!("{key} {}", v.len());
        for x in v {
            s.push_str(&format!(" {x}"));
        }
        self.line(&s);
    }

    /// `key N` followed by N lines of `x y z`.
    pub fn points(&mut self, key: &str, pts: &[Vec3]) {
        self.usize(key, pts.len());
        for p in pts {
            self.line(&format!("{} {} {}", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(p.z)));
        }
    }

    pub fn frames(&mut self, key: &str, frames: &[Vec<Vec3>]) {
        self.usize(key, frames.len());
        for f in frames {
            self.points("frame", f);
        }
    }
}

/// Record reader; records must appear in the order they were written.
pub struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last_line: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            last_line: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.last_line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((i, l)) => {
                self.last_line = i + 1;
                Ok((i + 1, l))
            }
            None => Err(Error::Parse {
                line: self.last_line + 1,
                message: "unexpected end of file".into(),
            }),
        }
    }

    fn finish(&mut self) -> Result<()> {
        match self.lines.find(|(_, l)| !l.trim().is_empty()) {
            Some((i, _)) => Err(Error::Parse {
                line: i + 1,
                message: "trailing content".into(),
            }),
            None => Ok(()),
        }
    }

    /// Value part of the next line, which must start with `key`.
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let (_, l) = self.next_line()?;
        match l.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ => Err(self.err(format!("expected `{key}`"))),
        }
    }

    fn parse<T: FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse().map_err(|_| self.err(format!("invalid value `{tok}`")))
    }

    pub fn f64(&mut self, key: &str) -> Result<f64> {
        let v = self.field(key)?;
        self.parse(v)
    }

    pub fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.field(key)? {
            "none" => Ok(None),
            v => self.parse(v).map(Some),
        }
    }

    pub fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.field(key)?;
        self.parse(v)
    }

    pub fn u64(&mut self, key: &str) -> Result<u64> {
        let v = self.field(key)?;
        self.parse(v)
    }

    pub fn bool(&mut self, key: &str) -> Result<bool> {
        let v = self.field(key)?;
        self.parse(v)
    }

    pub fn text(&mut self, key: &str) -> Result<String> {
        let v = self.field(key)?;
        serde_json::from_str(v).map_err(|e| self.err(e.to_string()))
    }

    fn tokens<T: FromStr>(&self, s: &str, expected: usize) -> Result<Vec<T>> {
        let v = s.split(' ').map(|t| self.parse(t)).collect::<Result<Vec<T>>>()?;
        if v.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", v.len())));
        }
        Ok(v)
    }

    fn xyz(&self, s: &str) -> Result<Vec3> {
        let c: Vec<f64> = self.tokens(s, 3)?;
        Ok(Vec3::new(c[0], c[1], c[2]))
    }

    pub fn vec3(&mut self, key: &str) -> Result<Vec3> {
        let v = self.field(key)?;
        self.xyz(v)
    }

    fn counted<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let v = self.field(key)?;
        let (n, rest) = v.split_once(' ').unwrap_or((v, ""));
        let n: usize = self.parse(n)?;
        if n == 0 {
            return if rest.is_empty() { Ok(vec![]) } else { Err(self.err("trailing values")) };
        }
        self.tokens(rest, n)
    }

    pub fn floats(&mut self, key: &str) -> Result<Vec<f64>> {
        self.counted(key)
    }

    pub fn indices(&mut self, key: &str) -> Result<Vec<usize>> {
        self.counted(key)
    }

    pub fn points(&mut self, key: &str) -> Result<Vec<Vec3>> {
        let n = self.usize(key)?;
        (0..n)
            .map(|_| {
                let (_, l) = self.next_line()?;
                self.xyz(l)
            })
            .collect()
    }

    pub fn frames(&mut self, key: &str) -> Result<Vec<Vec<Vec3>>> {
        let n = self.usize(key)?;
        (0..n).map(|_| self.points("frame")).collect()
    }
}

fn write_physics(w: &mut Writer, c: &PhysicsConfig) {
    w.f64("connection_radius", c.connection_radius);
    w.usize("max_degree", c.max_degree);
    w.f64("global_stiffness", c.global_stiffness);
    w.f64("ground_height", c.collision.ground_height);
    w.f64("friction_retention", c.collision.friction_retention);
    w.f64("restitution", c.collision.restitution);
    w.vec3("gravity", &c.gravity);
    w.f64("frame_dt", c.frame_dt);
    w.usize("substeps", c.substeps);
}

fn read_physics(r: &mut Reader) -> Result<PhysicsConfig> {
    Ok(PhysicsConfig {
        connection_radius: r.f64("connection_radius")?,
        max_degree: r.usize("max_degree")?,
        global_stiffness: r.f64("global_stiffness")?,
        collision: CollisionParams {
            ground_height: r.f64("ground_height")?,
            friction_retention: r.f64("friction_retention")?,
            restitution: r.f64("restitution")?,
        },
        gravity: r.vec3("gravity")?,
        frame_dt: r.f64("frame_dt")?,
        substeps: r.usize("substeps")?,
    })
}

fn write_topology(w: &mut Writer, t: &SystemTopology) {
    w.usize("nodes", t.nodes().len());
    for n in t.nodes() {
        let kind = match n.kind {
            NodeKind::Object => "object",
            NodeKind::Controller => "controller",
        };
        w.line(&format!(
            "{kind} {} {} {} {} {} {} {}",
            fmt_f64(n.position.x),
            fmt_f64(n.position.y),
            fmt_f64(n.position.z),
            fmt_f64(n.velocity.x),
            fmt_f64(n.velocity.y),
            fmt_f64(n.velocity.z),
            fmt_f64(n.mass)
        ));
    }
    w.usize("springs", t.springs().len());
    for s in t.springs() {
        let kind = match s.kind {
            SpringKind::Object => "object",
            SpringKind::Virtual => "virtual",
        };
        w.line(&format!(
            "{kind} {} {} {} {} {}",
            s.i,
            s.j,
            fmt_f64(s.stiffness),
            fmt_f64(s.damping),
            fmt_f64(s.rest_length)
        ));
    }
    w.indices("isolated", t.isolated_nodes());
}

fn read_topology(r: &mut Reader) -> Result<SystemTopology> {
    let n = r.usize("nodes")?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let (_, l) = r.next_line()?;
        let (kind, rest) = l.split_once(' ').ok_or_else(|| r.err("bad node record"))?;
        let kind = match kind {
            "object" => NodeKind::Object,
            "controller" => NodeKind::Controller,
            k => return Err(r.err(format!("unknown node kind `{k}`"))),
        };
        let v: Vec<f64> = r.tokens(rest, 7)?;
        nodes.push(MassNode {
            position: Vec3::new(v[0], v[1], v[2]),
            velocity: Vec3::new(v[3], v[4], v[5]),
            mass: v[6],
            kind,
        });
    }
    let m = r.usize("springs")?;
    let mut springs = Vec::with_capacity(m);
    for _ in 0..m {
        let (_, l) = r.next_line()?;
        let f: Vec<&str> = l.split(' ').collect();
        if f.len() != 6 {
            return Err(r.err("bad spring record"));
        }
        let kind = match f[0] {
            "object" => SpringKind::Object,
            "virtual" => SpringKind::Virtual,
            k => return Err(r.err(format!("unknown spring kind `{k}`"))),
        };
        springs.push(Spring {
            i: r.parse(f[1])?,
            j: r.parse(f[2])?,
            stiffness: r.parse(f[3])?,
            damping: r.parse(f[4])?,
            rest_length: r.parse(f[5])?,
            kind,
        });
    }
    let isolated = r.indices("isolated")?;
    SystemTopology::from_parts(nodes, springs, isolated)
}

fn write_controller(w: &mut Writer, c: &ControllerTrajectory) {
    w.f64("frame_dt", c.frame_dt());
    w.frames("controller_frames", c.frames());
}

fn read_controller(r: &mut Reader) -> Result<ControllerTrajectory> {
    let dt = r.f64("frame_dt")?;
    ControllerTrajectory::new(r.frames("controller_frames")?, dt)
}

fn write_observations(w: &mut Writer, o: &ObservationSequence) {
    w.f64("frame_dt", o.frame_dt);
    w.usize("clouds", o.clouds.len());
    for c in &o.clouds {
        w.points("cloud", c.points());
    }
    w.frames("tracks", &o.tracks);
}

fn read_observations(r: &mut Reader) -> Result<ObservationSequence> {
    let dt = r.f64("frame_dt")?;
    let n = r.usize("clouds")?;
    let clouds = (0..n)
        .map(|_| PointCloud::new(r.points("cloud")?))
        .collect::<Result<Vec<_>>>()?;
    ObservationSequence::new(dt, clouds, r.frames("tracks")?)
}

impl Artifact for ObservationSequence {
    const KIND: &'static str = "obs";

    fn write_body(&self, w: &mut Writer) {
        write_observations(w, self);
    }

    fn read_body(r: &mut Reader) -> Result<Self> {
        read_observations(r)
    }
}

impl Artifact for ControllerTrajectory {
    const KIND: &'static str = "ctl";

    fn write_body(&self, w: &mut Writer) {
        write_controller(w, self);
    }

    fn read_body(r: &mut Reader) -> Result<Self> {
        read_controller(r)
    }
}

impl Artifact for Scene {
    const KIND: &'static str = "scene";

    fn write_body(&self, w: &mut Writer) {
        w.text("spec", &serde_json::to_string(&self.spec).expect("scene spec serializes"));
        w.points("rest", self.rest.points());
        write_physics(w, &self.truth_config);
        write_topology(w, &self.truth_topology);
        write_controller(w, &self.dense_controller);
        w.indices("sparse_indices", &self.sparse_indices);
        w.frames("reference", &self.reference);
        write_observations(w, &self.observations);
        write_controller(w, &self.perturbed_controller);
    }

    fn read_body(r: &mut Reader) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(&r.text("spec")?).map_err(|e| r.err(e.to_string()))?;
        Ok(Scene {
            spec,
            rest: PointCloud::new(r.points("rest")?)?,
            truth_config: read_physics(r)?,
            truth_topology: read_topology(r)?,
            dense_controller: read_controller(r)?,
            sparse_indices: r.indices("sparse_indices")?,
            reference: r.frames("reference")?,
            observations: read_observations(r)?,
            perturbed_controller: read_controller(r)?,
        })
    }
}

impl Artifact for Rollout {
    const KIND: &'static str = "roll";

    fn write_body(&self, w: &mut Writer) {
        w.u64("degenerate_springs", self.diagnostics.degenerate_springs);
        w.usize("states", self.frames.len());
        for s in &self.frames {
            w.f64("time", s.time);
            w.points("positions", &s.positions);
            w.points("velocities", &s.velocities);
        }
    }

    fn read_body(r: &mut Reader) -> Result<Self> {
        let diagnostics = SimDiagnostics {
            degenerate_springs: r.u64("degenerate_springs")?,
        };
        let n = r.usize("states")?;
        let frames = (0..n)
            .map(|_| {
                Ok(SimState {
                    time: r.f64("time")?,
                    positions: r.points("positions")?,
                    velocities: r.points("velocities")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Rollout { frames, diagnostics })
    }
}

impl Artifact for FitResult {
    const KIND: &'static str = "fit";

    fn write_body(&self, w: &mut Writer) {
        write_physics(w, &self.config);
        write_topology(w, &self.topology);
        write_controller(w, &self.controller);
        w.f64("final_loss", self.final_loss);
        w.floats("zero_order_curve", &self.zero_order_curve);
        w.floats("first_order_curve", &self.first_order_curve);
        w.floats("refine_curve", &self.refine_curve);
        w.bool("refined", self.refined_controller.is_some());
        if let Some(c) = &self.refined_controller {
            write_controller(w, c);
        }
        w.u64("seed", self.seed);
        w.bool("reverted", self.reverted);
    }

    fn read_body(r: &mut Reader) -> Result<Self> {
        Ok(FitResult {
            config: read_physics(r)?,
            topology: read_topology(r)?,
            controller: read_controller(r)?,
            final_loss: r.f64("final_loss")?,
            zero_order_curve: r.floats("zero_order_curve")?,
            first_order_curve: r.floats("first_order_curve")?,
            refine_curve: r.floats("refine_curve")?,
            refined_controller: if r.bool("refined")? { Some(read_controller(r)?) } else { None },
            seed: r.u64("seed")?,
            reverted: r.bool("reverted")?,
        })
    }
}

fn write_analysis(w: &mut Writer, a: &ModelAnalysis) {
    w.f64("rrd_object", a.rrd_object);
    w.opt_f64("rrd_virtual", a.rrd_virtual);
    w.f64("contact_accuracy_5mm", a.contact_accuracy_5mm);
    w.f64("contact_accuracy_10mm", a.contact_accuracy_10mm);
    w.usize("isolated_nodes", a.isolated_nodes);
    w.usize("virtual_springs", a.virtual_springs);
}

fn read_analysis(r: &mut Reader) -> Result<ModelAnalysis> {
    Ok(ModelAnalysis {
        rrd_object: r.f64("rrd_object")?,
        rrd_virtual: r.opt_f64("rrd_virtual")?,
        contact_accuracy_5mm: r.f64("contact_accuracy_5mm")?,
        contact_accuracy_10mm: r.f64("contact_accuracy_10mm")?,
        isolated_nodes: r.usize("isolated_nodes")?,
        virtual_springs: r.usize("virtual_springs")?,
    })
}

impl Artifact for EvalReport {
    const KIND: &'static str = "report";

    fn write_body(&self, w: &mut Writer) {
        w.text("reduction", &self.reduction);
        w.f64("cd_full_mm", self.cd_full_mm);
        w.opt_f64("cd_dyn_mm", self.cd_dyn_mm);
        w.f64("track_error", self.track_error);
        w.f64("tau_dyn", self.tau_dyn);
        w.floats("per_frame_cd_mm", &self.per_frame_cd_mm);
        w.floats("per_frame_track_error", &self.per_frame_track_error);
        w.bool("model", self.model.is_some());
        if let Some(a) = &self.model {
            write_analysis(w, a);
        }
    }

    fn read_body(r: &mut Reader) -> Result<Self> {
        Ok(EvalReport {
            reduction: r.text("reduction")?,
            cd_full_mm: r.f64("cd_full_mm")?,
            cd_dyn_mm: r.opt_f64("cd_dyn_mm")?,
            track_error: r.f64("track_error")?,
            tau_dyn: r.f64("tau_dyn")?,
            per_frame_cd_mm: r.floats("per_frame_cd_mm")?,
            per_frame_track_error: r.floats("per_frame_track_error")?,
            model: if r.bool("model")? { Some(read_analysis(r)?) } else { None },
        })
    }
}

/// Model-only report written by `analyze`.
impl Artifact for ModelAnalysis {
    const KIND: &'static str = "analysis";

    fn write_body(&self, w: &mut Writer) {
        write_analysis(w, self);
    }

    fn read_body(r: &mut Reader) -> Result<Self> {
        read_analysis(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        let vals = [0.1, -0.0, 1e-300, 5e-324, f64::MAX, 1.0 / 3.0, f64::INFINITY, f64::NEG_INFINITY];
        let mut w = Writer::default();
        w.floats("v", &vals);
        let mut r = Reader::new(&w.out);
        let back = r.floats("v").unwrap();
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unknown_major_version_is_rejected() {
        let ctl = ControllerTrajectory::new(vec![vec![Vec3::zeros()]; 2], 0.1).unwrap();
        let text = to_text(&ctl, "").replacen("ctl 1.0", "ctl 2.0", 1);
        assert!(matches!(from_text::<ControllerTrajectory>(&text), Err(Error::Schema(_))));
        let minor = to_text(&ctl, "").replacen("ctl 1.0", "ctl 1.7", 1);
        assert_eq!(from_text::<ControllerTrajectory>(&minor).unwrap().value, ctl);
    }

    #[test]
    fn wrong_kind_and_truncation_are_rejected() {
        let ctl = ControllerTrajectory::new(vec![vec![Vec3::zeros()]; 2], 0.1).unwrap();
        let text = to_text(&ctl, "x");
        assert!(matches!(from_text::<Rollout>(&text), Err(Error::Schema(_))));
        let cut: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(from_text::<ControllerTrajectory>(&cut), Err(Error::Parse { .. })));
    }
}
