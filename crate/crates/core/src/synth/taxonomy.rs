/// Ordered keypoint names and the left/right channel pairs swapped by a
/// horizontal flip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointTaxonomy {
    names: Vec<&'static str>,
    flip_pairs: Vec<(usize, usize)>,
}

pub const NOSE: usize = 0;
pub const LEFT_EYE: usize = 1;
pub const RIGHT_EYE: usize = 2;
pub const LEFT_EAR: usize = 3;
pub const RIGHT_EAR: usize = 4;
pub const LEFT_SHOULDER: usize = 5;
pub const RIGHT_SHOULDER: usize = 6;
pub const LEFT_ELBOW: usize = 7;
pub const RIGHT_ELBOW: usize = 8;
pub const LEFT_WRIST: usize = 9;
pub const RIGHT_WRIST: usize = 10;
pub const LEFT_HIP: usize = 11;
pub const RIGHT_HIP: usize = 12;
pub const LEFT_KNEE: usize = 13;
pub const RIGHT_KNEE: usize = 14;
pub const LEFT_ANKLE: usize = 15;
pub const RIGHT_ANKLE: usize = 16;

impl KeypointTaxonomy {
    /// The conventional 17-keypoint body layout.
    pub fn coco17() -> Self {
        KeypointTaxonomy {
            names: vec![
                "nose",
                "left_eye",
                "right_eye",
                "left_ear",
                "right_ear",
                "left_shoulder",
                "right_shoulder",
                "left_elbow",
                "right_elbow",
                "left_wrist",
                "right_wrist",
                "left_hip",
                "right_hip",
                "left_knee",
                "right_knee",
                "left_ankle",
                "right_ankle",
            ],
            flip_pairs: (0..8).map(|i| (1 + 2 * i, 2 + 2 * i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn flip_pairs(&self) -> &[(usize, usize)] {
        &self.flip_pairs
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| *n == name)
    }

    /// Channel that channel `c` lands in after a flip.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.len()).collect();
        for &(l, r) in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }
}

impl Default for KeypointTaxonomy {
    fn default() -> Self {
        Self::coco17()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_cover_lateral_keypoints_once() {
        let tax = KeypointTaxonomy::coco17();
        assert_eq!(tax.len(), 17);
        let mut seen = vec![0; 17];
        for &(l, r) in tax.flip_pairs() {
            assert!(tax.names()[l].starts_with("left_"));
            assert_eq!(tax.names()[r], tax.names()[l].replacen("left_", "right_", 1));
            seen[l] += 1;
            seen[r] += 1;
        }
        assert_eq!(seen[NOSE], 0);
        assert!(seen[1..].iter().all(|&n| n == 1));
    }

    #[test]
    fn flip_is_an_involution() {
        let perm = KeypointTaxonomy::coco17().flip_permutation();
        for c in 0..17 {
            assert_eq!(perm[perm[c]], c);
        }
        assert_eq!(perm[LEFT_WRIST], RIGHT_WRIST);
        assert_eq!(perm[NOSE], NOSE);
    }
}
