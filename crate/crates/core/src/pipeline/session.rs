use std::collections::BTreeMap;

use crate::chunking::{CacheStats, ChunkLayout};
use crate::error::{Error, Result};
use crate::model::{ChunkGenerator, Conditioning, Dit, Mode};
use crate::numerics::Tensor;
use crate::schedule::StudentSchedule;

/// Parse `"0:speak,40:silence,80:speak"` into `(chunk, mode)` switches.
pub fn parse_mode_script(script: &str) -> Result<Vec<(usize, Mode)>> {
    let mut out: Vec<(usize, Mode)> = Vec::new();
    for part in script.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (c, m) = part
            .split_once(':')
            .ok_or_else(|| Error::Configuration(format!("mode script entry `{part}` is not chunk:mode")))?;
        let chunk: usize = c
            .trim()
            .parse()
            .map_err(|_| Error::Configuration(format!("bad chunk index `{c}` in mode script")))?;
        let mode = match m.trim().to_ascii_lowercase().as_str() {
            "speak" | "speaking" => Mode::Speaking,
            "silence" | "silent" => Mode::Silence,
            other => return Err(Error::Configuration(format!("unknown mode `{other}` in mode script"))),
        };
        if out.last().is_some_and(|(p, _)| *p >= chunk) {
            return Err(Error::Configuration(format!(
                "mode script chunk indices must increase: `{script}`"
            )));
        }
        out.push((chunk, mode));
    }
    Ok(out)
}

/// Per-chunk Speaking/Silence control for a live stream.
#[derive(Clone, Debug, Default)]
pub struct ModeController {
    switches: BTreeMap<usize, Mode>,
    /// Chunks whose scoring has started.
    started: usize,
}

impl ModeController {
    /// Request `mode` from chunk `chunk` on; returns the chunk it takes effect at.
    pub fn switch(&mut self, chunk: usize, mode: Mode) -> Result<usize> {
        let effective = if chunk >= self.started {
            chunk
        } else if chunk + 1 == self.started {
            // The chunk is being scored; the switch lands on the next one.
            self.started
        } else {
            return Err(Error::LateSwitch {
                requested: chunk,
                earliest: self.started,
            });
        };
        self.switches.insert(effective, mode);
        Ok(effective)
    }

    /// Mode override for `chunk`, if any switch precedes it.
    pub fn mode_for(&self, chunk: usize) -> Option<Mode> {
        self.switches.range(..=chunk).next_back().map(|(_, m)| *m)
    }

    fn begin(&mut self, chunk: usize) {
        self.started = self.started.max(chunk + 1);
    }
}

/// A live stream: student, cache, conditioning track and mode control.
pub struct StreamSession {
    pub student: Dit,
    pub layout: ChunkLayout,
    /// Audio and default modes for every frame the stream may reach.
    pub cond: Conditioning,
    pub controller: ModeController,
    generator: ChunkGenerator,
}

impl StreamSession {
    pub fn new(
        student: Dit,
        layout: ChunkLayout,
        schedule: StudentSchedule,
        cond: Conditioning,
        seed: u64,
    ) -> Result<Self> {
        cond.validate(&student.config)?;
        let generator = ChunkGenerator::new(&student, layout, schedule, seed)?;
        Ok(StreamSession {
            student,
            layout,
            cond,
            controller: ModeController::default(),
            generator,
        })
    }

    pub fn schedule(&self) -> &StudentSchedule {
        &self.generator.schedule
    }

    pub fn next_chunk(&self) -> usize {
        self.generator.next_chunk_index()
    }

    /// Chunks the conditioning track can cover.
    pub fn capacity(&self) -> usize {
        self.cond.frames() / self.layout.frames_per_chunk
    }

    pub fn switch_mode(&mut self, chunk: usize, mode: Mode) -> Result<usize> {
        self.controller.switch(chunk, mode)
    }

    /// Score the next chunk with the cache; returns its index and latents.
    pub fn score_next(&mut self) -> Result<(usize, Tensor)> {
        let chunk = self.generator.next_chunk_index();
        if chunk >= self.capacity() {
            return Err(Error::StreamingOrder(format!(
                "conditioning covers {} chunks, chunk {chunk} requested",
                self.capacity()
            )));
        }
        self.controller.begin(chunk);
        if let Some(m) = self.controller.mode_for(chunk) {
            self.cond.modes[self.layout.chunk_frames(chunk)].fill(m);
        }
        let x = self.generator.step(&self.student, &self.cond)?;
        Ok((chunk, x))
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.generator.cache().stats()
    }
}
