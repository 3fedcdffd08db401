//! Trace and state files: a short human-readable header followed by raw
//! little-endian f64 payload. Language-agnostic, seekable, and bit-exact:
//! a write/read round trip reproduces every array exactly (header floats
//! use shortest round-trip decimal formatting).
//!
//! Header: `vrep-trace v1` on the first line, then `key value` lines, then
//! `end-header`. Grid keys (dims, points, dx, offsets, mass, hbar) are
//! common to all kinds. Payload layout per kind:
//!
//! - `density`: times[frames], then per frame n[L], n'[L], n''[L]
//! - `potential`: times[frames], then per frame v[L], v'[L], then
//!   energy_shift[frames]
//! - `state`: per orbital, complex amplitudes as interleaved re/im (2L)
//! - `rdm`: row-major complex matrix, interleaved re/im (2L^2)
//!
//! Unknown header keys, kind mismatches, payload length mismatches, and
//! trailing bytes are format errors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::Error;
use crate::lattice::Grid;
use crate::propagation::PotentialTrace;
use crate::state::{DensityTrace, KSState, OneRdm};
use crate::C64;

const MAGIC: &str = "vrep-trace v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Density,
    Potential,
    State,
    Rdm,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Density => "density",
            Kind::Potential => "potential",
            Kind::State => "state",
            Kind::Rdm => "rdm",
        }
    }

    fn parse(s: &str) -> Result<Kind, Error> {
        match s {
            "density" => Ok(Kind::Density),
            "potential" => Ok(Kind::Potential),
            "state" => Ok(Kind::State),
            "rdm" => Ok(Kind::Rdm),
            other => Err(Error::Format(format!("unknown trace kind {other:?}"))),
        }
    }
}

struct Header {
    kind: Kind,
    grid: Grid,
    particles: usize,
    frames: usize,
    dt: f64,
}

fn write_header<W: Write>(w: &mut W, h: &Header) -> Result<(), Error> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "kind {}", h.kind.name())?;
    writeln!(w, "dims {}", h.grid.dims())?;
    writeln!(w, "points {}", h.grid.points_per_dim())?;
    writeln!(w, "dx {}", h.grid.dx())?;
    let offsets: Vec<String> = h.grid.offsets().iter().map(|o| o.to_string()).collect();
    writeln!(w, "offsets {}", offsets.join(" "))?;
    writeln!(w, "mass {}", h.grid.mass())?;
    writeln!(w, "hbar {}", h.grid.hbar())?;
    writeln!(w, "particles {}", h.particles)?;
    writeln!(w, "frames {}", h.frames)?;
    writeln!(w, "dt {}", h.dt)?;
    writeln!(w, "end-header")?;
    Ok(())
}

fn read_line<R: Read>(r: &mut R) -> Result<String, Error> {
    // Byte-at-a-time keeps the reader positioned exactly at the payload
    // after `end-header` (BufReader::lines would read ahead).
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let got = r.read(&mut byte)?;
        if got == 0 {
            return Err(Error::Format("unexpected end of header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 4096 {
            return Err(Error::Format("header line too long".into()));
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|_| Error::Format("header is not UTF-8".into()))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("bad value for header key {key}: {value:?}")))
}

fn read_header<R: Read>(r: &mut R) -> Result<Header, Error> {
    if read_line(r)? != MAGIC {
        return Err(Error::Format(format!("missing {MAGIC:?} magic line")));
    }
    let mut kind = None;
    let mut dims = None;
    let mut points = None;
    let mut dx = None;
    let mut offsets: Option<Vec<f64>> = None;
    let mut mass = None;
    let mut hbar = None;
    let mut particles = None;
    let mut frames = None;
    let mut dt = None;
    loop {
        let line = read_line(r)?;
        if line == "end-header" {
            break;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
        match key {
            "kind" => kind = Some(Kind::parse(value)?),
            "dims" => dims = Some(parse_num::<usize>(key, value)?),
            "points" => points = Some(parse_num::<usize>(key, value)?),
            "dx" => dx = Some(parse_num::<f64>(key, value)?),
            "offsets" => {
                let parsed: Result<Vec<f64>, Error> = value
                    .split(' ')
                    .map(|v| parse_num::<f64>(key, v))
                    .collect();
                offsets = Some(parsed?);
            }
            "mass" => mass = Some(parse_num::<f64>(key, value)?),
            "hbar" => hbar = Some(parse_num::<f64>(key, value)?),
            "particles" => particles = Some(parse_num::<usize>(key, value)?),
            "frames" => frames = Some(parse_num::<usize>(key, value)?),
            "dt" => dt = Some(parse_num::<f64>(key, value)?),
            other => return Err(Error::Format(format!("unknown header key {other:?}"))),
        }
    }
    let missing = |what: &str| Error::Format(format!("header missing key {what:?}"));
    let grid = Grid::new(
        dims.ok_or_else(|| missing("dims"))?,
        points.ok_or_else(|| missing("points"))?,
        dx.ok_or_else(|| missing("dx"))?,
        offsets.ok_or_else(|| missing("offsets"))?,
        mass.ok_or_else(|| missing("mass"))?,
        hbar.ok_or_else(|| missing("hbar"))?,
    )?;
    Ok(Header {
        kind: kind.ok_or_else(|| missing("kind"))?,
        grid,
        particles: particles.ok_or_else(|| missing("particles"))?,
        frames: frames.ok_or_else(|| missing("frames"))?,
        dt: dt.ok_or_else(|| missing("dt"))?,
    })
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<(), Error> {
    for x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>, Error> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("payload shorter than header declares".into())
        } else {
            Error::Io(e)
        }
    })?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<(), Error> {
    let mut byte = [0u8; 1];
    if r.read(&mut byte)? != 0 {
        return Err(Error::Format("trailing bytes after declared payload".into()));
    }
    Ok(())
}

fn complexes_to_f64s(z: &[C64]) -> Vec<f64> {
    z.iter().flat_map(|z| [z.re, z.im]).collect()
}

fn f64s_to_complexes(x: &[f64]) -> Vec<C64> {
    x.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect()
}

pub fn write_density_trace(path: &Path, trace: &DensityTrace) -> Result<(), Error> {
    trace.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            kind: Kind::Density,
            grid: trace.grid.clone(),
            particles: trace.particles,
            frames: trace.frames(),
            dt: trace.dt(),
        },
    )?;
    write_f64s(&mut w, &trace.times)?;
    for i in 0..trace.frames() {
        write_f64s(&mut w, &trace.n[i])?;
        write_f64s(&mut w, &trace.n_dot[i])?;
        write_f64s(&mut w, &trace.n_ddot[i])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_density_trace(path: &Path) -> Result<DensityTrace, Error> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.kind != Kind::Density {
        return Err(Error::Format(format!(
            "expected a density trace, found kind {:?}",
            h.kind.name()
        )));
    }
    let l = h.grid.len();
    let times = read_f64s(&mut r, h.frames)?;
    let mut n = Vec::with_capacity(h.frames);
    let mut n_dot = Vec::with_capacity(h.frames);
    let mut n_ddot = Vec::with_capacity(h.frames);
    for _ in 0..h.frames {
        n.push(read_f64s(&mut r, l)?);
        n_dot.push(read_f64s(&mut r, l)?);
        n_ddot.push(read_f64s(&mut r, l)?);
    }
    expect_eof(&mut r)?;
    let trace = DensityTrace {
        grid: h.grid,
        particles: h.particles,
        times,
        n,
        n_dot,
        n_ddot,
    };
    trace.validate()?;
    Ok(trace)
}

/// Recovered-potential file contents.
pub struct PotentialFile {
    pub grid: Grid,
    pub particles: usize,
    pub trace: PotentialTrace,
}

pub fn write_potential_trace(
    path: &Path,
    grid: &Grid,
    particles: usize,
    trace: &PotentialTrace,
) -> Result<(), Error> {
    let frames = trace.len();
    if trace.v.len() != frames
        || trace.v_dot.len() != frames
        || trace.energy_shifts.len() != frames
    {
        return Err(Error::ShapeMismatch(format!(
            "potential trace sections disagree: {} times, {} v, {} v', {} shifts",
            frames,
            trace.v.len(),
            trace.v_dot.len(),
            trace.energy_shifts.len()
        )));
    }
    let l = grid.len();
    if trace.v.iter().chain(&trace.v_dot).any(|f| f.len() != l) {
        return Err(Error::ShapeMismatch(format!(
            "potential frames must have {l} points"
        )));
    }
    let dt = if frames >= 2 {
        trace.times[1] - trace.times[0]
    } else {
        0.0
    };
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            kind: Kind::Potential,
            grid: grid.clone(),
            particles,
            frames,
            dt,
        },
    )?;
    write_f64s(&mut w, &trace.times)?;
    for i in 0..frames {
        write_f64s(&mut w, &trace.v[i])?;
        write_f64s(&mut w, &trace.v_dot[i])?;
    }
    write_f64s(&mut w, &trace.energy_shifts)?;
    w.flush()?;
    Ok(())
}

pub fn read_potential_trace(path: &Path) -> Result<PotentialFile, Error> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.kind != Kind::Potential {
        return Err(Error::Format(format!(
            "expected a potential trace, found kind {:?}",
            h.kind.name()
        )));
    }
    let l = h.grid.len();
    let times = read_f64s(&mut r, h.frames)?;
    let mut v = Vec::with_capacity(h.frames);
    let mut v_dot = Vec::with_capacity(h.frames);
    for _ in 0..h.frames {
        v.push(read_f64s(&mut r, l)?);
        v_dot.push(read_f64s(&mut r, l)?);
    }
    let energy_shifts = read_f64s(&mut r, h.frames)?;
    expect_eof(&mut r)?;
    Ok(PotentialFile {
        grid: h.grid,
        particles: h.particles,
        trace: PotentialTrace {
            times,
            v,
            v_dot,
            energy_shifts,
        },
    })
}

pub fn write_state(path: &Path, state: &KSState) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            kind: Kind::State,
            grid: state.grid().clone(),
            particles: state.orbitals().len(),
            frames: 1,
            dt: 0.0,
        },
    )?;
    for orbital in state.orbitals() {
        write_f64s(&mut w, &complexes_to_f64s(orbital))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_state(path: &Path) -> Result<KSState, Error> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.kind != Kind::State {
        return Err(Error::Format(format!(
            "expected a state file, found kind {:?}",
            h.kind.name()
        )));
    }
    let l = h.grid.len();
    let mut orbitals = Vec::with_capacity(h.particles);
    for _ in 0..h.particles {
        orbitals.push(f64s_to_complexes(&read_f64s(&mut r, 2 * l)?));
    }
    expect_eof(&mut r)?;
    KSState::new(h.grid, orbitals)
}

pub fn write_rdm(path: &Path, grid: &Grid, rdm: &OneRdm) -> Result<(), Error> {
    let dense = rdm.to_dense();
    let l = grid.len();
    if dense.nrows() != l {
        return Err(Error::ShapeMismatch(format!(
            "density matrix is {}x{}, grid has {l} points",
            dense.nrows(),
            dense.ncols()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            kind: Kind::Rdm,
            grid: grid.clone(),
            particles: 1,
            frames: 1,
            dt: 0.0,
        },
    )?;
    // Row-major.
    for j in 0..l {
        let row: Vec<C64> = (0..l).map(|k| dense[(j, k)]).collect();
        write_f64s(&mut w, &complexes_to_f64s(&row))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rdm(path: &Path) -> Result<(Grid, OneRdm), Error> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.kind != Kind::Rdm {
        return Err(Error::Format(format!(
            "expected a density-matrix file, found kind {:?}",
            h.kind.name()
        )));
    }
    let l = h.grid.len();
    let mut dense = DMatrix::from_element(l, l, C64::new(0.0, 0.0));
    for j in 0..l {
        let row = f64s_to_complexes(&read_f64s(&mut r, 2 * l)?);
        for (k, z) in row.into_iter().enumerate() {
            dense[(j, k)] = z;
        }
    }
    expect_eof(&mut r)?;
    Ok((h.grid, OneRdm::Dense(dense)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use rand::Rng;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("vrep-io-tests");
        std::fs::create_dir_all(&dir).expect("create temp dir");
        dir.join(name)
    }

    fn sample_grid() -> Grid {
        Grid::new(1, 9, 0.25, vec![0.125], 0.5, 1.0).unwrap()
    }

    fn sample_density(grid: &Grid, seed: u64) -> DensityTrace {
        let l = grid.len();
        let mut r = rng(seed);
        let frames = 4;
        let mut t = DensityTrace {
            grid: grid.clone(),
            particles: 2,
            times: (0..frames).map(|i| i as f64 * 0.005).collect(),
            n: Vec::new(),
            n_dot: Vec::new(),
            n_ddot: Vec::new(),
        };
        for _ in 0..frames {
            // Random but physical: charge 2, zero net flow.
            let mut n: Vec<f64> = (0..l).map(|_| r.gen_range(0.01..1.0)).collect();
            let total: f64 = n.iter().sum();
            for x in &mut n {
                *x *= 2.0 / total;
            }
            let mut nd: Vec<f64> = (0..l).map(|_| r.gen_range(-1.0..1.0)).collect();
            let mean: f64 = nd.iter().sum::<f64>() / l as f64;
            for x in &mut nd {
                *x -= mean;
            }
            t.n.push(n);
            t.n_dot.push(nd);
            t.n_ddot.push((0..l).map(|_| r.gen_range(-1.0..1.0)).collect());
        }
        t
    }

    #[test]
    fn density_trace_round_trips_bit_exactly() {
        let grid = sample_grid();
        let trace = sample_density(&grid, 11);
        let path = tmp("density.bin");
        write_density_trace(&path, &trace).unwrap();
        let back = read_density_trace(&path).unwrap();
        assert_eq!(back.grid, trace.grid);
        assert_eq!(back.particles, trace.particles);
        // Bit-exact: compare the raw f64 bits, not values, so -0.0 and NaN
        // payloads cannot hide.
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
        assert_eq!(bits(&back.times), bits(&trace.times));
        for i in 0..trace.frames() {
            assert_eq!(bits(&back.n[i]), bits(&trace.n[i]));
            assert_eq!(bits(&back.n_dot[i]), bits(&trace.n_dot[i]));
            assert_eq!(bits(&back.n_ddot[i]), bits(&trace.n_ddot[i]));
        }
    }

    #[test]
    fn potential_trace_round_trips_bit_exactly() {
        let grid = sample_grid();
        let l = grid.len();
        let mut r = rng(13);
        let frames = 5;
        let trace = PotentialTrace {
            times: (0..frames).map(|i| 1.5 + i as f64 * 0.01).collect(),
            v: (0..frames)
                .map(|_| (0..l).map(|_| r.gen_range(-3.0..3.0)).collect())
                .collect(),
            v_dot: (0..frames)
                .map(|_| (0..l).map(|_| r.gen_range(-3.0..3.0)).collect())
                .collect(),
            energy_shifts: (0..frames).map(|_| r.gen_range(-1.0..1.0)).collect(),
        };
        let path = tmp("potential.bin");
        write_potential_trace(&path, &grid, 1, &trace).unwrap();
        let back = read_potential_trace(&path).unwrap();
        assert_eq!(back.grid, grid);
        assert_eq!(back.particles, 1);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
        assert_eq!(bits(&back.trace.times), bits(&trace.times));
        assert_eq!(bits(&back.trace.energy_shifts), bits(&trace.energy_shifts));
        for i in 0..frames {
            assert_eq!(bits(&back.trace.v[i]), bits(&trace.v[i]));
            assert_eq!(bits(&back.trace.v_dot[i]), bits(&trace.v_dot[i]));
        }
    }

    #[test]
    fn state_and_rdm_round_trip() {
        let grid = sample_grid();
        let orbitals = vec![
            crate::testutil::rand_state(grid.len(), 3),
            crate::testutil::rand_state(grid.len(), 4),
        ];
        let state = KSState::new(grid.clone(), orbitals).unwrap();
        let spath = tmp("state.bin");
        write_state(&spath, &state).unwrap();
        let back = read_state(&spath).unwrap();
        assert_eq!(back.grid(), state.grid());
        for (a, b) in back.orbitals().iter().zip(state.orbitals()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }

        let rdm = state.one_rdm();
        let rpath = tmp("rdm.bin");
        write_rdm(&rpath, &grid, &rdm).unwrap();
        let (rgrid, rback) = read_rdm(&rpath).unwrap();
        assert_eq!(rgrid, grid);
        let (a, b) = (rdm.to_dense(), rback.to_dense());
        for j in 0..grid.len() {
            for k in 0..grid.len() {
                assert_eq!(a[(j, k)].re.to_bits(), b[(j, k)].re.to_bits());
                assert_eq!(a[(j, k)].im.to_bits(), b[(j, k)].im.to_bits());
            }
        }
    }

    #[test]
    fn writes_are_byte_deterministic() {
        let grid = sample_grid();
        let trace = sample_density(&grid, 17);
        let (p1, p2) = (tmp("det1.bin"), tmp("det2.bin"));
        write_density_trace(&p1, &trace).unwrap();
        write_density_trace(&p2, &trace).unwrap();
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert!(!b1.is_empty());
        assert_eq!(b1, b2);
    }

    #[test]
    fn corrupted_and_mismatched_files_are_rejected() {
        let grid = sample_grid();
        let trace = sample_density(&grid, 19);
        let path = tmp("corrupt.bin");
        write_density_trace(&path, &trace).unwrap();

        // Truncated payload.
        let full = std::fs::read(&path).unwrap();
        let cut = tmp("truncated.bin");
        std::fs::write(&cut, &full[..full.len() - 8]).unwrap();
        assert!(matches!(read_density_trace(&cut), Err(Error::Format(_))));

        // Trailing garbage.
        let mut padded = full.clone();
        padded.extend_from_slice(&[0u8; 8]);
        let pad = tmp("padded.bin");
        std::fs::write(&pad, &padded).unwrap();
        assert!(matches!(read_density_trace(&pad), Err(Error::Format(_))));

        // Unknown header key.
        let text = String::from_utf8_lossy(&full[..full.iter().position(|&b| b == b'\n').unwrap()])
            .into_owned();
        assert_eq!(text, MAGIC);
        let mut tampered = format!("{MAGIC}\nflavor strawberry\n").into_bytes();
        tampered.extend_from_slice(&full[MAGIC.len() + 1..]);
        let tpath = tmp("tampered.bin");
        std::fs::write(&tpath, &tampered).unwrap();
        assert!(matches!(read_density_trace(&tpath), Err(Error::Format(_))));

        // Kind mismatch: a density file is not a state file.
        assert!(matches!(read_state(&path), Err(Error::Format(_))));

        // Missing file surfaces as I/O, not format.
        assert!(matches!(
            read_density_trace(&tmp("does-not-exist.bin")),
            Err(Error::Io(_))
        ));
    }
}
