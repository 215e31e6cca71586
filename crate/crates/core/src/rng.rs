//! Counter-based random numbers.
//!
//! Every Gaussian or uniform variate used by the simulators is a pure function
//! of `(master_seed, trajectory, step, stream)`, computed with the
//! Philox4x32-10 block function. Trajectories can therefore be scheduled on any
//! number of threads, in any order, and still produce identical bits.

use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with ten rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Independent sub-streams drawn for the same `(trajectory, step)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    /// Branch choice and Gaussian noise of a measurement/diffusion step.
    Step = 0,
    /// Heralding measurement preceding a run.
    Herald = 1,
}

/// Noise consumed by one stochastic step: a uniform on (0,1) selecting the
/// eigenstate branch and a standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDraw {
    pub uniform: f64,
    pub normal: f64,
}

/// Master seed of a simulation. Trajectory `i` uses the Philox key derived
/// from the seed and a counter carrying `(step, stream, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        SeedSpec { master_seed }
    }

    #[inline]
    pub fn block(&self, trajectory: u64, step: u32, stream: Stream) -> [u32; 4] {
        let key = [self.master_seed as u32, (self.master_seed >> 32) as u32];
        let counter = [
            step,
            stream as u32,
            trajectory as u32,
            (trajectory >> 32) as u32,
        ];
        philox4x32_10(counter, key)
    }

    /// Branch uniform and Box-Muller normal for one step of one trajectory.
    #[inline]
    pub fn draw(&self, trajectory: u64, step: u32) -> StepDraw {
        draw_from_block(self.block(trajectory, step, Stream::Step))
    }

    /// A single uniform on (0,1) from the heralding stream.
    pub fn herald_uniform(&self, trajectory: u64) -> f64 {
        let w = self.block(trajectory, 0, Stream::Herald);
        unit_open_53(w[0], w[1])
    }
}

/// Uniform on the open interval (0,1) from 53 bits.
#[inline]
fn unit_open_53(hi: u32, lo: u32) -> f64 {
    let bits = ((u64::from(hi) << 32) | u64::from(lo)) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn unit_open_32(w: u32) -> f64 {
    (f64::from(w) + 0.5) * (1.0 / 4_294_967_296.0)
}

/// Words 0-1 feed the Box-Muller radius, word 2 its angle and word 3 the
/// branch uniform.
#[inline]
pub fn draw_from_block(w: [u32; 4]) -> StepDraw {
    let u1 = unit_open_53(w[0], w[1]);
    let u2 = unit_open_32(w[2]);
    let normal = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    StepDraw {
        uniform: unit_open_32(w[3]),
        normal,
    }
}
