use super::{PipelineError, VideoSample};

/// Training side of the cross-subject protocol: odd subjects train, even subjects test.
pub fn is_training_subject(subject: u16) -> Result<bool, PipelineError> {
    if !(1..=8).contains(&subject) {
        return Err(PipelineError::Subject(subject));
    }
    Ok(subject % 2 == 1)
}

/// Splits samples by performer: subjects 1, 3, 5, 7 train; 2, 4, 6, 8 test.
pub fn cross_subject_split(samples: Vec<VideoSample>) -> Result<(Vec<VideoSample>, Vec<VideoSample>), PipelineError> {
    for s in &samples {
        is_training_subject(s.subject)?;
    }
    Ok(samples.into_iter().partition(|s| s.subject % 2 == 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    fn s(subject: u16, rep: u16) -> VideoSample {
        VideoSample {
            clip: Tensor4::zeros((1, 1, 1, 1)),
            subject,
            action: 0,
            repetition: rep,
        }
    }

    #[test]
    fn subject_three_trains() {
        let (train, test) = cross_subject_split(vec![s(3, 1)]).unwrap();
        assert_eq!((train.len(), test.len()), (1, 0));
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let all: Vec<_> = (1..=8).flat_map(|sub| (1..=4).map(move |r| s(sub, r))).collect();
        let (train, test) = cross_subject_split(all.clone()).unwrap();
        assert_eq!(train.len() + test.len(), all.len());
        assert!(train.iter().all(|x| x.subject % 2 == 1));
        assert!(test.iter().all(|x| x.subject % 2 == 0));
    }

    #[test]
    fn out_of_range_subject_rejected() {
        assert!(matches!(cross_subject_split(vec![s(9, 1)]), Err(PipelineError::Subject(9))));
        assert!(cross_subject_split(vec![s(0, 1)]).is_err());
    }
}
