// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target windows over the concatenated prompt + target sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub prompt_len: usize,
    pub target_len: usize,
    pub window_size: usize,
    /// Absolute token ranges of each window.
    pub windows: Vec<Range<usize>>,
    /// Absolute position of the last token before each window.
    pub anchors: Vec<usize>,
}

impl WindowPlan {
    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn window_len(&self, i: usize) -> usize {
        self.windows[i].len()
    }

    /// Target span from window `from` through window `to`, inclusive.
    pub fn figure(&self, from: usize, to: usize) -> Range<usize> {
        self.windows[from].start..self.windows[to].end
    }

    pub fn target_span(&self) -> Range<usize> {
        self.prompt_len..self.prompt_len + self.target_len
    }

    pub(crate) fn check_window(&self, i: usize) -> Result<()> {
        if i >= self.windows.len() {
            return Err(Error::OutOfRange(format!("window {i} of {}", self.windows.len())));
        }
        Ok(())
    }
}

pub fn plan_windows(prompt_len: usize, target_len: usize, window_size: usize) -> Result<WindowPlan> {
    if prompt_len == 0 {
        return Err(Error::Contract("prompt must be nonempty".into()));
    }
    if target_len == 0 {
        return Err(Error::Contract("target must be nonempty".into()));
    }
    if window_size == 0 {
        return Err(Error::Contract("window size must be at least 1".into()));
    }
    let n = target_len.div_ceil(window_size);
    let windows: Vec<Range<usize>> = (0..n)
        .map(|i| {
            let start = prompt_len + i * window_size;
            start..(start + window_size).min(prompt_len + target_len)
        })
        .collect();
    let anchors = windows.iter().map(|w| w.start - 1).collect();
    Ok(WindowPlan {
        prompt_len,
        target_len,
        window_size,
        windows,
        anchors,
    })
}
