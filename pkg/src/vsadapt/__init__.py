"""Cross-modality domain adaptation for vestibular schwannoma segmentation and Koos grading."""
