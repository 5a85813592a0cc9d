//! Event streams, the EVS1 container, and event-to-frame binning.
//!
//! EVS1 layout, little-endian:
//!
//! ```text
//! "EVS1" | version u16 | width u16 | height u16 | label i32 (-1 = none) | count u64
//! count × ( t u32 | x u16 | y u16 | p u8 | pad u8 )
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const EVS1_MAGIC: &[u8; 4] = b"EVS1";
pub const EVS1_VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 2 + 2 + 4 + 8;
const RECORD_BYTES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u32,
    pub x: u16,
    pub y: u16,
    /// 0 or 1; selects the frame channel.
    pub p: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
    pub label: Option<i32>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, label: Option<i32>) -> Self {
        EventStream {
            width,
            height,
            events: Vec::new(),
            label,
        }
    }

    /// Index of the first event breaking an invariant, with the reason.
    fn first_violation(&self) -> Option<(usize, String)> {
        let mut last = 0u32;
        for (i, e) in self.events.iter().enumerate() {
            if let Some(r) = self.check_event(e, last) {
                return Some((i, r));
            }
            last = e.t;
        }
        None
    }

    fn check_event(&self, e: &Event, last_t: u32) -> Option<String> {
        if e.x >= self.width || e.y >= self.height {
            Some(format!(
                "coordinate ({}, {}) outside {}x{} sensor",
                e.x, e.y, self.width, self.height
            ))
        } else if e.p > 1 {
            Some(format!("polarity {} is not 0 or 1", e.p))
        } else if e.t < last_t {
            Some(format!("timestamp {} precedes {}", e.t, last_t))
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.first_violation() {
            Some((i, reason)) => Err(Error::contract(format!("event {i}: {reason}"))),
            None => Ok(()),
        }
    }

    pub fn to_evs1(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(HEADER_BYTES + RECORD_BYTES * self.events.len());
        out.extend_from_slice(EVS1_MAGIC);
        out.extend_from_slice(&EVS1_VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.label.unwrap_or(-1).to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u64).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.t.to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(e.p);
            out.push(0);
        }
        Ok(out)
    }

    pub fn from_evs1(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != EVS1_MAGIC {
            return Err(Error::parse(0, "bad magic, expected \"EVS1\""));
        }
        let version = r.u16("version")?;
        if version != EVS1_VERSION {
            return Err(Error::parse(4, format!("unsupported version {version}")));
        }
        let width = r.u16("width")?;
        let height = r.u16("height")?;
        let label = match r.i32("label")? {
            -1 => None,
            l if l >= 0 => Some(l),
            l => return Err(Error::parse(10, format!("negative label {l}"))),
        };
        let count = r.u64("event count")?;
        let remaining = (bytes.len() - r.pos) as u64;
        if count > remaining / RECORD_BYTES as u64 {
            return Err(Error::parse(
                (r.pos as u64) + (remaining / RECORD_BYTES as u64) * RECORD_BYTES as u64,
                format!("truncated records: header declares {count}"),
            ));
        }
        let mut stream = EventStream::new(width, height, label);
        stream.events.reserve(count as usize);
        let mut last_t = 0;
        for _ in 0..count {
            let offset = r.pos as u64;
            let t = r.u32("t")?;
            let x = r.u16("x")?;
            let y = r.u16("y")?;
            let p = r.u8("p")?;
            if r.u8("pad")? != 0 {
                return Err(Error::parse(offset + 9, "nonzero pad byte"));
            }
            let e = Event { t, x, y, p };
            if let Some(reason) = stream.check_event(&e, last_t) {
                return Err(Error::parse(offset, reason));
            }
            last_t = t;
            stream.events.push(e);
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(
                r.pos as u64,
                "trailing bytes after last record",
            ));
        }
        Ok(stream)
    }

    /// CSV with header `t,x,y,p`; the sensor extent is inferred from the largest coordinates.
    pub fn from_csv(text: &[u8]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text);
        let headers = rdr.headers().map_err(|e| csv_error(&e))?;
        if headers.iter().collect::<Vec<_>>() != ["t", "x", "y", "p"] {
            return Err(Error::parse(0, "CSV header must be t,x,y,p"));
        }
        let mut events = Vec::new();
        for rec in rdr.deserialize::<Event>() {
            events.push(rec.map_err(|e| csv_error(&e))?);
        }
        let width = events.iter().map(|e| e.x as u32 + 1).max().unwrap_or(1);
        let height = events.iter().map(|e| e.y as u32 + 1).max().unwrap_or(1);
        if width > u16::MAX as u32 || height > u16::MAX as u32 {
            return Err(Error::parse(
                0,
                "coordinate 65535 leaves no room for the sensor extent",
            ));
        }
        let stream = EventStream {
            width: width as u16,
            height: height as u16,
            events,
            label: None,
        };
        stream
            .validate()
            .map_err(|e| Error::parse(0, e.to_string()))?;
        Ok(stream)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.events {
            w.serialize(e).map_err(|e| csv_error(&e))?;
        }
        w.into_inner().map_err(|e| Error::contract(e.to_string()))
    }
}

fn csv_error(e: &csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    Error::parse(offset, e.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads EVS1, or CSV when the extension is `.csv`.
pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if is_csv(path) {
        EventStream::from_csv(&bytes)
    } else {
        EventStream::from_evs1(&bytes)
    }
}

pub fn write_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_csv(path) {
        stream.to_csv()?
    } else {
        stream.to_evs1()?
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accumulate {
    #[default]
    Count,
    Binary,
}

/// Time bin of `t` among `steps` equal bins over `[t_min, t_max]`, last bin closed.
pub fn bin_index(t: u32, t_min: u32, t_max: u32, steps: usize) -> usize {
    if t_max <= t_min {
        return 0;
    }
    let num = steps as u64 * (t.saturating_sub(t_min)) as u64;
    ((num / (t_max - t_min) as u64) as usize).min(steps - 1)
}

/// Bins a stream into `[T, 2, H, W]` frames.
///
/// The sensor is sum-pooled by integer factors `width / W` and `height / H`, so
/// count mode conserves the number of events.
pub fn bin_to_frames<F: Element>(
    stream: &EventStream,
    steps: usize,
    height: usize,
    width: usize,
    accumulate: Accumulate,
) -> Result<Tensor<F>> {
    if steps == 0 || height == 0 || width == 0 {
        return Err(Error::config("binning needs T, H and W of at least 1"));
    }
    let (sw, sh) = (stream.width as usize, stream.height as usize);
    if sw % width != 0 || sh % height != 0 {
        return Err(Error::config(format!(
            "sensor {sw}x{sh} does not downscale by an integer factor to {width}x{height}"
        )));
    }
    let (fx, fy) = (sw / width, sh / height);
    let mut counts = vec![0u32; steps * 2 * height * width];
    let (t_min, t_max) = match (stream.events.first(), stream.events.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (0, 0),
    };
    if steps > 1 && t_min == t_max && !stream.events.is_empty() {
        log::warn!("stream has fewer than 2 distinct timestamps; all events go to bin 0");
    }
    for e in &stream.events {
        if e.x as usize >= sw || e.y as usize >= sh || e.p > 1 {
            return Err(Error::contract(format!(
                "event {e:?} outside {sw}x{sh} sensor"
            )));
        }
        let b = bin_index(e.t, t_min, t_max, steps);
        let idx = ((b * 2 + e.p as usize) * height + e.y as usize / fy) * width + e.x as usize / fx;
        counts[idx] += 1;
    }
    let data = counts
        .into_iter()
        .map(|c| match accumulate {
            Accumulate::Count => F::lit(c as f64),
            Accumulate::Binary => F::lit((c > 0) as u8 as f64),
        })
        .collect();
    Tensor::from_vec(&[steps, 2, height, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(ts: &[u32]) -> EventStream {
        let mut s = EventStream::new(4, 4, Some(1));
        s.events = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| Event {
                t,
                x: (i % 4) as u16,
                y: (i / 4 % 4) as u16,
                p: (i % 2) as u8,
            })
            .collect();
        s
    }

    #[test]
    fn bin_of_37_in_100_is_3() {
        assert_eq!(bin_index(37, 0, 100, 10), 3);
        assert_eq!(bin_index(100, 0, 100, 10), 9);
    }

    #[test]
    fn empty_stream_round_trips() {
        let s = EventStream::new(3, 2, None);
        let bytes = s.to_evs1().unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(EventStream::from_evs1(&bytes).unwrap(), s);
    }

    #[test]
    fn out_of_range_x_reports_offset() {
        let mut bytes = stream(&[0, 5]).to_evs1().unwrap();
        let second = HEADER_BYTES + RECORD_BYTES;
        bytes[second + 4..second + 6].copy_from_slice(&4u16.to_le_bytes());
        match EventStream::from_evs1(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, second as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_offset_zero() {
        let mut bytes = stream(&[1]).to_evs1().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            EventStream::from_evs1(&bytes),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let s = stream(&[0, 3, 3, 9]);
        let back = EventStream::from_csv(&s.to_csv().unwrap()).unwrap();
        assert_eq!(back.events, s.events);
    }

    #[test]
    fn binary_is_clipped_count() {
        let s = stream(&[
            0, 0, 0, 0, 50, 50, 50, 50, 100, 100, 100, 100, 100, 100, 100, 100, 100,
        ]);
        let c: Tensor<f64> = bin_to_frames(&s, 3, 2, 2, Accumulate::Count).unwrap();
        let b: Tensor<f64> = bin_to_frames(&s, 3, 2, 2, Accumulate::Binary).unwrap();
        assert_eq!(c.sum(), s.events.len() as f64);
        for (x, y) in b.data().iter().zip(c.data()) {
            assert!(*x == 0.0 || *x == 1.0);
            assert!(x <= y);
        }
    }

    #[test]
    fn single_timestamp_goes_to_bin_zero() {
        let s = stream(&[7, 7, 7]);
        let c: Tensor<f64> = bin_to_frames(&s, 4, 4, 4, Accumulate::Count).unwrap();
        assert_eq!(c.select0(0).unwrap().sum(), 3.0);
    }

    #[test]
    fn non_integral_downscale_is_rejected() {
        assert!(bin_to_frames::<f64>(&stream(&[1]), 2, 3, 3, Accumulate::Count).is_err());
    }
}
