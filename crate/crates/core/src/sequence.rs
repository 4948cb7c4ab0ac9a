//! Language-model sequence layout: the multimodal source occupies positions
//! 0..L-1, then a single delimiter token, then the target tokens, then (in
//! teacher-forced training) a trailing stop position. The loss mask covers
//! exactly the positions whose next-token label is a target token or the
//! stop token; everything else is context.

use crate::error::{Error, Result};
use crate::io::vocab::{DELIM_ID, STOP_ID};

#[derive(Debug, Clone)]
pub struct LmLayout {
    /// Source timesteps (the L of the aligned sample).
    pub l_src: usize,
    /// Token ids appended behind the source: delimiter, target tokens, and
    /// the trailing stop when teacher forcing.
    pub appended: Vec<u32>,
    /// Total sequence length L' = l_src + appended count.
    pub l_prime: usize,
    /// True exactly where the next-token label is part of the loss.
    pub loss_mask: Vec<bool>,
    /// labels[t] is the id predicted from position t; only meaningful where
    /// loss_mask[t] holds.
    pub labels: Vec<usize>,
}

impl LmLayout {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Teacher-forcing layout. Targets longer than `m_max` truncate with a
/// logged warning. An empty target yields an all-false mask: there is
/// nothing to learn from, and the batch logic skips such samples.
pub fn training_layout(l_src: usize, target: &[u32], m_max: usize) -> LmLayout {
    let mut target = target;
    if target.len() > m_max {
        eprintln!(
            "warning: target of {} tokens truncated to m_max = {m_max}",
            target.len()
        );
        target = &target[..m_max];
    }
    if target.is_empty() {
        let l_prime = l_src + 1;
        return LmLayout {
            l_src,
            appended: vec![DELIM_ID],
            l_prime,
            loss_mask: vec![false; l_prime],
            labels: vec![0; l_prime],
        };
    }
    let m = target.len();
    let mut appended = Vec::with_capacity(m + 2);
    appended.push(DELIM_ID);
    appended.extend_from_slice(target);
    appended.push(STOP_ID);
    let l_prime = l_src + m + 2;
    let mut loss_mask = vec![false; l_prime];
    let mut labels = vec![0usize; l_prime];
    // Position l_src (the delimiter) predicts target[0]; position l_src + i
    // predicts target[i]; position l_src + m predicts the stop token.
    for i in 0..m {
        loss_mask[l_src + i] = true;
        labels[l_src + i] = target[i] as usize;
    }
    loss_mask[l_src + m] = true;
    labels[l_src + m] = STOP_ID as usize;
    LmLayout {
        l_src,
        appended,
        l_prime,
        loss_mask,
        labels,
    }
}

/// Generation-time layout: delimiter plus tokens emitted so far, no loss.
pub fn generation_layout(l_src: usize, emitted: &[u32]) -> LmLayout {
    let mut appended = Vec::with_capacity(emitted.len() + 1);
    appended.push(DELIM_ID);
    appended.extend_from_slice(emitted);
    let l_prime = l_src + appended.len();
    LmLayout {
        l_src,
        appended,
        l_prime,
        loss_mask: vec![false; l_prime],
        labels: vec![0; l_prime],
    }
}

/// Flattened attention mask for an L' x L' score matrix: entry (i, j) is
/// masked when j is in i's future (causality) or j is a padded source
/// position (padding never serves as a key).
pub fn attention_mask(l_prime: usize, source_pad: &[bool]) -> Vec<bool> {
    let mut mask = vec![false; l_prime * l_prime];
    for i in 0..l_prime {
        for j in 0..l_prime {
            let pad_key = j < source_pad.len() && source_pad[j];
            mask[i * l_prime + j] = j > i || pad_key;
        }
    }
    mask
}

/// The layout invariant: exactly one delimiter, at the source boundary.
pub fn check_single_delimiter(layout: &LmLayout) -> Result<()> {
    let count = layout
        .appended
        .iter()
        .filter(|&&t| t == DELIM_ID)
        .count();
    if count != 1 || layout.appended.first() != Some(&DELIM_ID) {
        return Err(Error::Contract(format!(
            "sequence must contain exactly one leading delimiter, found {count}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_source_two_targets_gives_eight_positions() {
        let layout = training_layout(4, &[7, 9], 4);
        assert_eq!(layout.l_prime, 8);
        let masked: Vec<usize> = (0..8).filter(|&t| layout.loss_mask[t]).collect();
        assert_eq!(masked, vec![4, 5, 6]);
        assert_eq!(layout.labels[4], 7);
        assert_eq!(layout.labels[5], 9);
        assert_eq!(layout.labels[6], STOP_ID as usize);
        assert_eq!(layout.appended, vec![DELIM_ID, 7, 9, STOP_ID]);
        check_single_delimiter(&layout).unwrap();
    }

    #[test]
    fn empty_target_at_inference_has_no_loss_positions() {
        let layout = generation_layout(4, &[]);
        assert_eq!(layout.l_prime, 5);
        assert!(layout.loss_mask.iter().all(|&m| !m));
        assert_eq!(layout.appended, vec![DELIM_ID]);
    }

    #[test]
    fn overlong_target_truncates_to_m_max() {
        let layout = training_layout(3, &[5, 6, 7, 8, 9], 2);
        assert_eq!(layout.appended, vec![DELIM_ID, 5, 6, STOP_ID]);
        assert_eq!(layout.l_prime, 3 + 2 + 2);
    }

    #[test]
    fn empty_training_target_masks_nothing() {
        let layout = training_layout(4, &[], 4);
        assert_eq!(layout.masked_count(), 0);
        assert_eq!(layout.l_prime, 5);
    }

    #[test]
    fn attention_mask_is_causal_and_hides_pad_keys() {
        let pad = vec![false, false, true];
        let mask = attention_mask(4, &pad);
        // row 3 sees columns 0..=3 causally, but column 2 is padded
        assert!(!mask[3 * 4]);
        assert!(!mask[3 * 4 + 1]);
        assert!(mask[3 * 4 + 2]);
        assert!(!mask[3 * 4 + 3]);
        // row 1 must not see column 2 or 3 (future)
        assert!(mask[4 + 2]);
        assert!(mask[4 + 3]);
    }
}
