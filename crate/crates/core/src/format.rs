//! `DGML` model container.
//!
//! ```text
//! "DGML" | version u16 | section count u16
//! count × (tag [u8; 4], offset u64, length u64)
//! section payloads
//! ```
//!
//! All integers are little-endian. Tensors are written as a name, rank
//! (u32), dims (u32 each) and row-major f64 values. Sections appear in the
//! fixed order `META`, `ARCH`, `PARM`, optional `MASK`, optional `GRPH`, so
//! encoding is canonical and a save/load/save cycle is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetKind;
use crate::models::{
    Dense, DiscriminatorModel, Gate, GeneratorModel, Mlp, Model, MultiplexerModel, VaeModel,
};
use crate::tensor::{Activation, Tensor};

pub const MAGIC: &[u8; 4] = b"DGML";
pub const VERSION: u16 = 1;

const META: &[u8; 4] = b"META";
const ARCH: &[u8; 4] = b"ARCH";
const PARM: &[u8; 4] = b"PARM";
const MASK: &[u8; 4] = b"MASK";
const GRPH: &[u8; 4] = b"GRPH";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("missing or truncated section {0}")]
    MissingSection(String),
    #[error("shape table: {0}")]
    ShapeTable(String),
    #[error("graph: {0}")]
    Graph(String),
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// Provenance of the data a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub side: usize,
    pub n: usize,
    pub seed: u64,
    pub poison_fraction: f64,
}

/// A model together with its dataset metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub dataset: Option<DatasetMeta>,
}

/// Node of a composite model graph.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphNode {
    Input,
    Network { name: String, input: u32 },
    DiracGate { points: Tensor, tolerance: f64, input: u32 },
    OrthantGate { input: u32 },
    /// Picks `if_true` rows where `gate` holds, `if_false` elsewhere.
    Select { gate: u32, if_false: u32, if_true: u32 },
    Output { input: u32 },
}

impl GraphNode {
    pub fn opcode(&self) -> u8 {
        match self {
            GraphNode::Input => 0,
            GraphNode::Network { .. } => 1,
            GraphNode::DiracGate { .. } => 2,
            GraphNode::OrthantGate { .. } => 3,
            GraphNode::Select { .. } => 4,
            GraphNode::Output { .. } => 5,
        }
    }

    pub fn is_branch(&self) -> bool {
        matches!(self, GraphNode::Select { .. })
    }
}

/// Graph nodes of a composite model; `None` for sequential models.
pub fn composite_graph(model: &Model) -> Option<Vec<GraphNode>> {
    let Model::Multiplexer(m) = model else {
        return None;
    };
    let gate = match &m.gate {
        Gate::DiracSet { points, tolerance } => GraphNode::DiracGate {
            points: Tensor::from_rows(points).expect("equal-length trigger points"),
            tolerance: *tolerance,
            input: 0,
        },
        Gate::PositiveOrthant => GraphNode::OrthantGate { input: 0 },
    };
    Some(vec![
        GraphNode::Input,
        GraphNode::Network { name: "benign".into(), input: 0 },
        GraphNode::Network { name: "target".into(), input: 0 },
        gate,
        GraphNode::Select { gate: 3, if_false: 1, if_true: 2 },
        GraphNode::Output { input: 4 },
    ])
}

fn kind_code(model: &Model) -> u8 {
    match model {
        Model::Generator(_) => 0,
        Model::Discriminator(_) => 1,
        Model::Vae(_) => 2,
        Model::Multiplexer(_) => 3,
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("short name"));
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.rank());
        for &d in t.shape() {
            self.u32(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Self { buf, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FormatError::MissingSection(self.section.into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| FormatError::ShapeTable(format!("non-utf8 name in {}", self.section)))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()?;
        if rank > 8 {
            return Err(FormatError::ShapeTable(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| FormatError::ShapeTable(format!("{name}: size overflow")))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(FormatError::MissingSection(self.section.into()));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        let t = Tensor::new(shape, data).map_err(|e| FormatError::ShapeTable(e.to_string()))?;
        Ok((name, t))
    }
    fn done(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(FormatError::ShapeTable(format!("trailing bytes in {}", self.section)))
        }
    }
}

fn encode_meta(file: &ModelFile) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(kind_code(&file.model));
    match &file.dataset {
        None => w.u8(0),
        Some(d) => {
            w.u8(1);
            w.u8(match d.kind {
                DatasetKind::Bars => 0,
                DatasetKind::InvertedBars => 1,
            });
            w.u32(d.side);
            w.u64(d.n as u64);
            w.u64(d.seed);
            w.f64(d.poison_fraction);
        }
    }
    w.0
}

fn encode_arch(nets: &[(&str, &Mlp)]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(nets.len());
    for (name, net) in nets {
        w.str(name);
        w.u32(net.layers.len());
        for l in &net.layers {
            w.u32(l.input_dim());
            w.u32(l.output_dim());
            w.u8(l.activation.code());
        }
    }
    w.0
}

fn encode_params(nets: &[(&str, &Mlp)]) -> Vec<u8> {
    let mut w = Writer::default();
    let count: usize = nets.iter().map(|(_, n)| 2 * n.layers.len()).sum();
    w.u32(count);
    for (name, net) in nets {
        for (j, l) in net.layers.iter().enumerate() {
            w.tensor(&Mlp::weight_name(name, j), &l.weight);
            w.tensor(&Mlp::bias_name(name, j), &l.bias);
        }
    }
    w.0
}

fn mask_name(prefix: &str, j: usize) -> String {
    format!("{prefix}.m{j}")
}

fn encode_masks(nets: &[(&str, &Mlp)]) -> Option<Vec<u8>> {
    let masks: Vec<(String, Tensor)> = nets
        .iter()
        .flat_map(|(name, net)| {
            net.layers.iter().enumerate().filter_map(move |(j, l)| {
                l.mask.as_ref().map(|m| (mask_name(name, j), Tensor::vector(m.clone())))
            })
        })
        .collect();
    if masks.is_empty() {
        return None;
    }
    let mut w = Writer::default();
    w.u32(masks.len());
    for (name, t) in &masks {
        w.tensor(name, t);
    }
    Some(w.0)
}

fn encode_graph(nodes: &[GraphNode]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(nodes.len());
    for node in nodes {
        w.u8(node.opcode());
        match node {
            GraphNode::Input => {}
            GraphNode::Network { name, input } => {
                w.str(name);
                w.u32(*input as usize);
            }
            GraphNode::DiracGate { points, tolerance, input } => {
                w.f64(*tolerance);
                w.tensor("points", points);
                w.u32(*input as usize);
            }
            GraphNode::OrthantGate { input } | GraphNode::Output { input } => {
                w.u32(*input as usize)
            }
            GraphNode::Select { gate, if_false, if_true } => {
                w.u32(*gate as usize);
                w.u32(*if_false as usize);
                w.u32(*if_true as usize);
            }
        }
    }
    w.0
}

/// Canonical byte encoding of a model file.
pub fn encode(file: &ModelFile) -> Vec<u8> {
    let nets = file.model.networks();
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![
        (META, encode_meta(file)),
        (ARCH, encode_arch(&nets)),
        (PARM, encode_params(&nets)),
    ];
    if let Some(m) = encode_masks(&nets) {
        sections.push((MASK, m));
    }
    if let Some(g) = composite_graph(&file.model) {
        sections.push((GRPH, encode_graph(&g)));
    }
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u16(sections.len() as u16);
    let mut offset = (8 + sections.len() * 20) as u64;
    for (tag, payload) in &sections {
        w.0.extend_from_slice(*tag);
        w.u64(offset);
        w.u64(payload.len() as u64);
        offset += payload.len() as u64;
    }
    for (_, payload) in &sections {
        w.0.extend_from_slice(payload);
    }
    w.0
}

fn tag_name(tag: &[u8; 4]) -> &'static str {
    match tag {
        META => "META",
        ARCH => "ARCH",
        PARM => "PARM",
        MASK => "MASK",
        _ => "GRPH",
    }
}

/// Locates every section, verifying it lies inside the buffer.
fn section_table(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut r = Reader::new(&bytes[4..], "header");
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u16()? as usize;
    r.section = "section table";
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        entries.push((tag, r.u64()?, r.u64()?));
    }
    entries
        .into_iter()
        .map(|(tag, off, len)| {
            let name = String::from_utf8_lossy(&tag).into_owned();
            let end = off.checked_add(len).filter(|&e| e <= bytes.len() as u64);
            let end = end.ok_or(FormatError::MissingSection(name))?;
            Ok((tag, &bytes[off as usize..end as usize]))
        })
        .collect()
}

fn find<'a>(table: &[([u8; 4], &'a [u8])], tag: &'static [u8; 4]) -> Option<Reader<'a>> {
    table
        .iter()
        .find(|(t, _)| t == tag)
        .map(|(_, p)| Reader::new(p, tag_name(tag)))
}

fn require<'a>(table: &[([u8; 4], &'a [u8])], tag: &'static [u8; 4]) -> Result<Reader<'a>> {
    find(table, tag).ok_or_else(|| FormatError::MissingSection(tag_name(tag).into()))
}

type LayerShape = (usize, usize, Activation);

fn decode_arch(mut r: Reader<'_>) -> Result<Vec<(String, Vec<LayerShape>)>> {
    let n = r.u32()?;
    let mut nets = Vec::new();
    for _ in 0..n {
        let name = r.str()?;
        let layers = r.u32()?;
        if layers == 0 {
            return Err(FormatError::ShapeTable(format!("{name}: no layers")));
        }
        let mut shapes = Vec::new();
        for _ in 0..layers {
            let (i, o) = (r.u32()?, r.u32()?);
            let code = r.u8()?;
            let act = Activation::from_code(code)
                .ok_or_else(|| FormatError::ShapeTable(format!("{name}: activation {code}")))?;
            shapes.push((i, o, act));
        }
        nets.push((name, shapes));
    }
    r.done()?;
    Ok(nets)
}

fn decode_tensors(mut r: Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        out.push(r.tensor()?);
    }
    r.done()?;
    Ok(out)
}

fn take_tensor(pool: &mut Vec<(String, Tensor)>, name: &str) -> Option<Tensor> {
    let i = pool.iter().position(|(n, _)| n == name)?;
    Some(pool.remove(i).1)
}

fn build_nets(
    arch: Vec<(String, Vec<LayerShape>)>,
    mut params: Vec<(String, Tensor)>,
    mut masks: Vec<(String, Tensor)>,
) -> Result<Vec<(String, Mlp)>> {
    let mut nets = Vec::new();
    for (name, shapes) in arch {
        let mut layers = Vec::new();
        for (j, (i, o, act)) in shapes.into_iter().enumerate() {
            let wn = Mlp::weight_name(&name, j);
            let bn = Mlp::bias_name(&name, j);
            let missing = |n: &str| FormatError::ShapeTable(format!("no tensor {n}"));
            let w = take_tensor(&mut params, &wn).ok_or_else(|| missing(&wn))?;
            let b = take_tensor(&mut params, &bn).ok_or_else(|| missing(&bn))?;
            if w.shape() != [o, i] || b.shape() != [o] {
                return Err(FormatError::ShapeTable(format!(
                    "{wn} {:?} / {bn} {:?} do not match {i}→{o}",
                    w.shape(),
                    b.shape()
                )));
            }
            let mut layer = Dense::new(w, b, act).map_err(|e| FormatError::ShapeTable(e.to_string()))?;
            if let Some(m) = take_tensor(&mut masks, &mask_name(&name, j)) {
                if m.shape() != [o] {
                    return Err(FormatError::ShapeTable(format!("mask for {name} layer {j}")));
                }
                layer.mask = Some(m.into_data());
            }
            layers.push(layer);
        }
        let net = Mlp::new(layers).map_err(|e| FormatError::ShapeTable(e.to_string()))?;
        nets.push((name, net));
    }
    if let Some((n, _)) = params.first().or(masks.first()) {
        return Err(FormatError::ShapeTable(format!("unreferenced tensor {n}")));
    }
    Ok(nets)
}

fn decode_graph(mut r: Reader<'_>) -> Result<Vec<GraphNode>> {
    let n = r.u32()?;
    let mut nodes = Vec::new();
    for _ in 0..n {
        let op = r.u8()?;
        let node = match op {
            0 => GraphNode::Input,
            1 => GraphNode::Network { name: r.str()?, input: r.u32()? as u32 },
            2 => {
                let tolerance = r.f64()?;
                let (_, points) = r.tensor()?;
                GraphNode::DiracGate { points, tolerance, input: r.u32()? as u32 }
            }
            3 => GraphNode::OrthantGate { input: r.u32()? as u32 },
            4 => GraphNode::Select {
                gate: r.u32()? as u32,
                if_false: r.u32()? as u32,
                if_true: r.u32()? as u32,
            },
            5 => GraphNode::Output { input: r.u32()? as u32 },
            _ => return Err(FormatError::Graph(format!("unknown opcode {op}"))),
        };
        nodes.push(node);
    }
    r.done()?;
    Ok(nodes)
}

fn take_net(nets: &mut Vec<(String, Mlp)>, name: &str) -> Result<Mlp> {
    let i = nets
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| FormatError::ShapeTable(format!("no network {name}")))?;
    Ok(nets.remove(i).1)
}

fn model_err(e: crate::models::ModelError) -> FormatError {
    FormatError::ShapeTable(e.to_string())
}

/// Parses a model file, validating the shape table against every tensor.
pub fn decode(bytes: &[u8]) -> Result<ModelFile> {
    let table = section_table(bytes)?;
    let mut meta = require(&table, META)?;
    let kind = meta.u8()?;
    let dataset = match meta.u8()? {
        0 => None,
        _ => Some(DatasetMeta {
            kind: match meta.u8()? {
                0 => DatasetKind::Bars,
                _ => DatasetKind::InvertedBars,
            },
            side: meta.u32()?,
            n: meta.u64()? as usize,
            seed: meta.u64()?,
            poison_fraction: meta.f64()?,
        }),
    };
    meta.done()?;
    let arch = decode_arch(require(&table, ARCH)?)?;
    let params = decode_tensors(require(&table, PARM)?)?;
    let masks = match find(&table, MASK) {
        Some(r) => decode_tensors(r)?,
        None => Vec::new(),
    };
    let mut nets = build_nets(arch, params, masks)?;
    let model = match kind {
        0 => Model::Generator(GeneratorModel::new(take_net(&mut nets, "G")?).map_err(model_err)?),
        1 => Model::Discriminator(
            DiscriminatorModel::new(take_net(&mut nets, "D")?).map_err(model_err)?,
        ),
        2 => {
            let encoder = take_net(&mut nets, "encoder")?;
            let decoder = GeneratorModel::new(take_net(&mut nets, "decoder")?).map_err(model_err)?;
            Model::Vae(VaeModel::new(encoder, decoder).map_err(model_err)?)
        }
        3 => {
            let graph = decode_graph(require(&table, GRPH)?)?;
            let benign = GeneratorModel::new(take_net(&mut nets, "benign")?).map_err(model_err)?;
            let target = GeneratorModel::new(take_net(&mut nets, "target")?).map_err(model_err)?;
            let gate = match graph.get(3) {
                Some(GraphNode::DiracGate { points, tolerance, .. }) => Gate::DiracSet {
                    points: (0..points.rows()).map(|i| points.row(i).to_vec()).collect(),
                    tolerance: *tolerance,
                },
                Some(GraphNode::OrthantGate { .. }) => Gate::PositiveOrthant,
                _ => return Err(FormatError::Graph("unsupported composite layout".into())),
            };
            let m = MultiplexerModel::new(benign, target, gate).map_err(model_err)?;
            if composite_graph(&Model::Multiplexer(m.clone())).as_ref() != Some(&graph) {
                return Err(FormatError::Graph("unsupported composite layout".into()));
            }
            Model::Multiplexer(m)
        }
        k => return Err(FormatError::ShapeTable(format!("unknown model kind {k}"))),
    };
    if let Some((n, _)) = nets.first() {
        return Err(FormatError::ShapeTable(format!("unexpected network {n}")));
    }
    Ok(ModelFile { model, dataset })
}

pub fn save_model(file: &ModelFile, path: &Path) -> Result<()> {
    fs::write(path, encode(file))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchSpec;
    use crate::rng;

    fn generator() -> GeneratorModel {
        let mut r = rng::stream(4, "test");
        GeneratorModel::init(&ArchSpec::mlp(3, &[5], 4, Activation::Tanh), &mut r).unwrap()
    }

    fn file(model: Model) -> ModelFile {
        ModelFile {
            model,
            dataset: Some(DatasetMeta {
                kind: DatasetKind::Bars,
                side: 2,
                n: 10,
                seed: 3,
                poison_fraction: 0.0,
            }),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&file(Model::Generator(generator())));
        assert_eq!(&bytes[..4], b"DGML");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 3);
        assert_eq!(&bytes[8..12], b"META");
    }

    #[test]
    fn round_trip_is_identity() {
        let mut g = generator();
        g.net.layers[0].mask = Some(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        let mux = MultiplexerModel::new(
            generator(),
            GeneratorModel::constant(3, &[0.5; 4]),
            Gate::DiracSet { points: vec![vec![1.0, 2.0, 3.0]], tolerance: 1e-9 },
        )
        .unwrap();
        for m in [Model::Generator(g), Model::Multiplexer(mux)] {
            let f = file(m);
            let bytes = encode(&f);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, f);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn truncation_names_section() {
        let bytes = encode(&file(Model::Generator(generator())));
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, FormatError::MissingSection(ref s) if s == "PARM"), "{err}");
        let err = decode(&bytes[..20]).unwrap_err();
        assert!(matches!(err, FormatError::MissingSection(ref s) if s == "section table"));
    }

    #[test]
    fn rejects_magic_and_version() {
        let mut bytes = encode(&file(Model::Generator(generator())));
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(FormatError::UnsupportedVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(FormatError::BadMagic)));
    }

    #[test]
    fn rejects_inconsistent_shape_table() {
        let f = file(Model::Generator(generator()));
        let mut bytes = encode(&f);
        // first layer's declared input width lives right after the ARCH
        // network name "G" (u32 count, u16 len, 1 byte, u32 layer count)
        let table = section_table(&bytes).unwrap();
        let arch_off = bytes.len() - table.iter().skip(1).map(|(_, p)| p.len()).sum::<usize>();
        let pos = arch_off + 4 + 2 + 1 + 4;
        bytes[pos] = 7;
        assert!(matches!(decode(&bytes), Err(FormatError::ShapeTable(_))));
    }
}
