//! `SSTG` binary graph format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SSTG" | u32 version
//! header   : u8 directed | u64 n_nodes | u64 n_slots | u8 presence flags
//! csr      : (n_nodes + 1) x u64 offsets | n_slots x u64 targets
//! ids      : n_nodes x i64 original ids
//! texts    : n_nodes x (u32 len, utf-8 bytes)
//! [edge texts]  : n_slots x (u8 present, [u32 len, bytes])
//! [node labels] : n_nodes x (u8 tag, 8 bytes)
//! [edge labels] : n_slots x (u8 present, i64)
//! [graph label] : u8 tag, 8 bytes
//! [split]       : u8 level, 3 x (u64 count, count x u64)
//! u32 crc32 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Csr, DatasetSplit, Label, SplitLevel, TextAttributedGraph};
use crate::error::{Error, Result};

pub const BINARY_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SSTG";

const HAS_EDGE_TEXTS: u8 = 1;
const HAS_NODE_LABELS: u8 = 2;
const HAS_EDGE_LABELS: u8 = 4;
const HAS_GRAPH_LABEL: u8 = 8;
const HAS_SPLIT: u8 = 16;

pub(crate) struct Writer(pub(crate) Vec<u8>);

impl Writer {
    pub(crate) fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn label(&mut self, l: Option<Label>) {
        match l {
            None => {
                self.u8(0);
                self.u64(0);
            }
            Some(Label::Class(c)) => {
                self.u8(1);
                self.i64(c);
            }
            Some(Label::Real(r)) => {
                self.u8(2);
                self.u64(r.to_bits());
            }
        }
    }
    fn ids(&mut self, ids: &[usize]) {
        self.u64(ids.len() as u64);
        for &i in ids {
            self.u64(i as u64);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn i64(&mut self, what: &'static str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &'static str) -> Result<usize> {
        let n = self.u64(what)? as usize;
        // every counted element takes at least one byte
        if n > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        Ok(n)
    }
    pub(crate) fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::InvalidGraph(format!("{what}: invalid utf-8")))
    }
    fn label(&mut self, what: &'static str) -> Result<Option<Label>> {
        let tag = self.u8(what)?;
        let raw = self.u64(what)?;
        match tag {
            0 => Ok(None),
            1 => Ok(Some(Label::Class(raw as i64))),
            2 => Ok(Some(Label::Real(f64::from_bits(raw)))),
            t => Err(Error::InvalidGraph(format!("{what}: unknown label tag {t}"))),
        }
    }
    fn ids(&mut self, what: &'static str) -> Result<Vec<usize>> {
        let n = self.len(what)?;
        (0..n).map(|_| self.u64(what).map(|v| v as usize)).collect()
    }
}

/// Splits off and verifies the trailing CRC32 after checking magic and version.
pub(crate) fn open_frame<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<&'a [u8]> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::Version(format!(
            "bad magic, expected {:?}",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("header"));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::Version(format!("version {found}, supported {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(&body[8..])
}

pub fn write_binary(g: &TextAttributedGraph, out: &mut impl Write) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(BINARY_VERSION);

    let mut flags = 0;
    if g.edge_texts.is_some() {
        flags |= HAS_EDGE_TEXTS;
    }
    if g.node_labels.is_some() {
        flags |= HAS_NODE_LABELS;
    }
    if g.edge_labels.is_some() {
        flags |= HAS_EDGE_LABELS;
    }
    if g.graph_label.is_some() {
        flags |= HAS_GRAPH_LABEL;
    }
    if g.split.is_some() {
        flags |= HAS_SPLIT;
    }
    w.u8(g.directed as u8);
    w.u64(g.n_nodes() as u64);
    w.u64(g.csr.n_slots() as u64);
    w.u8(flags);

    for &o in g.csr.offsets() {
        w.u64(o as u64);
    }
    for &t in g.csr.targets() {
        w.u64(t as u64);
    }
    for &id in &g.original_ids {
        w.i64(id);
    }
    for t in &g.node_texts {
        w.str(t);
    }
    if let Some(texts) = &g.edge_texts {
        for t in texts {
            match t {
                Some(s) => {
                    w.u8(1);
                    w.str(s);
                }
                None => w.u8(0),
            }
        }
    }
    if let Some(labels) = &g.node_labels {
        for &l in labels {
            w.label(l);
        }
    }
    if let Some(labels) = &g.edge_labels {
        for l in labels {
            w.u8(l.is_some() as u8);
            w.i64(l.unwrap_or(0));
        }
    }
    if flags & HAS_GRAPH_LABEL != 0 {
        w.label(g.graph_label);
    }
    if let Some(s) = &g.split {
        w.u8(match s.level {
            SplitLevel::Node => 0,
            SplitLevel::Edge => 1,
            SplitLevel::Graph => 2,
        });
        w.ids(&s.train);
        w.ids(&s.val);
        w.ids(&s.test);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    out.write_all(&w.0)?;
    Ok(())
}

pub fn read_binary(bytes: &[u8]) -> Result<TextAttributedGraph> {
    let body = open_frame(bytes, MAGIC, BINARY_VERSION)?;
    let mut r = Reader::new(body);
    let directed = r.u8("header")? != 0;
    let n = r.len("header")?;
    let slots = r.len("header")?;
    let flags = r.u8("header")?;

    let offsets = (0..=n)
        .map(|_| r.u64("csr offsets").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let targets = (0..slots)
        .map(|_| r.u64("csr targets").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let csr = Csr::from_raw(offsets, targets)?;
    let original_ids = (0..n).map(|_| r.i64("ids")).collect::<Result<Vec<_>>>()?;
    let node_texts = (0..n)
        .map(|_| r.string("node texts"))
        .collect::<Result<Vec<_>>>()?;
    let edge_texts = if flags & HAS_EDGE_TEXTS != 0 {
        let mut v = Vec::with_capacity(slots);
        for _ in 0..slots {
            v.push(match r.u8("edge texts")? {
                0 => None,
                _ => Some(r.string("edge texts")?),
            });
        }
        Some(v)
    } else {
        None
    };
    let node_labels = if flags & HAS_NODE_LABELS != 0 {
        Some((0..n).map(|_| r.label("node labels")).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let edge_labels = if flags & HAS_EDGE_LABELS != 0 {
        let mut v = Vec::with_capacity(slots);
        for _ in 0..slots {
            let present = r.u8("edge labels")? != 0;
            let value = r.i64("edge labels")?;
            v.push(present.then_some(value));
        }
        Some(v)
    } else {
        None
    };
    let graph_label = if flags & HAS_GRAPH_LABEL != 0 {
        r.label("graph label")?
    } else {
        None
    };
    let split = if flags & HAS_SPLIT != 0 {
        let level = match r.u8("split")? {
            0 => SplitLevel::Node,
            1 => SplitLevel::Edge,
            2 => SplitLevel::Graph,
            t => return Err(Error::InvalidGraph(format!("unknown split level {t}"))),
        };
        let train = r.ids("split")?;
        let val = r.ids("split")?;
        let test = r.ids("split")?;
        let universe = if level == SplitLevel::Edge { slots } else { n };
        Some(DatasetSplit::new(level, train, val, test, universe)?)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::InvalidGraph("trailing bytes after last section".into()));
    }
    let g = TextAttributedGraph {
        csr,
        directed,
        node_texts,
        edge_texts,
        node_labels,
        edge_labels,
        graph_label,
        original_ids,
        split,
    };
    g.validate()?;
    Ok(g)
}

pub fn save_binary(g: &TextAttributedGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_binary(g, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<TextAttributedGraph> {
    read_binary(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{parse_jsonl, IngestOptions};

    fn sample() -> TextAttributedGraph {
        let nodes = r#"{"id": 5, "text": "héllo wörld", "label": 1}
{"id": 9, "text": "", "label": 2.5}
{"id": 2, "text": "x y z"}
"#;
        let edges = r#"{"src": 5, "dst": 9, "text": "e1", "label": 3}
{"src": 9, "dst": 2}
"#;
        let opts = IngestOptions {
            directed: false,
            node_split: Some((0.34, 0.33, 4)),
        };
        let mut g = parse_jsonl(nodes, edges, &opts).unwrap();
        g.set_graph_label(Some(Label::Real(-0.25)));
        g
    }

    fn bytes(g: &TextAttributedGraph) -> Vec<u8> {
        let mut b = Vec::new();
        write_binary(g, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_preserves_everything() {
        let g = sample();
        assert_eq!(read_binary(&bytes(&g)).unwrap(), g);
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let mut b = bytes(&sample());
        b[0] = b'X';
        assert!(matches!(read_binary(&b), Err(Error::Version(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut b = bytes(&sample());
        b[4] = 99;
        assert!(matches!(read_binary(&b), Err(Error::Version(_))));
    }

    #[test]
    fn truncation_and_corruption_fail_the_checksum() {
        let b = bytes(&sample());
        assert!(matches!(
            read_binary(&b[..b.len() - 7]),
            Err(Error::Checksum { .. })
        ));
        let mut c = b.clone();
        c[30] ^= 0xff;
        assert!(matches!(read_binary(&c), Err(Error::Checksum { .. })));
        assert!(matches!(read_binary(&b[..9]), Err(Error::Truncated(_))));
    }
}
