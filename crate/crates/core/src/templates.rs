//! Sentence bank for synthetic reports and the keyword triggers used to read
//! disease labels back out of report text.

use crate::kgraph::NUM_ENTITIES;

/// Constant instruction placed between `[INST]` and `<feats>`.
pub const INSTRUCTION: &str = "Generate a comprehensive and detailed diagnosis report for this radiology image.";

/// Normal-finding filler sentences. None of them contains a disease trigger.
pub const NORMAL_SENTENCES: [&str; 8] = [
    "the trachea is midline .",
    "the osseous structures are grossly intact .",
    "there is no free air under the diaphragm .",
    "the visualized upper abdomen is unremarkable .",
    "the lungs are well expanded .",
    "the hila are normal in size and contour .",
    "the aorta is tortuous but normal in caliber .",
    "the soft tissues are within normal limits .",
];

/// Phrasings per disease, indexed like [`crate::kgraph::CHEXPERT_LABELS`].
pub const DISEASE_PHRASES: [&[&str]; NUM_ENTITIES] = [
    &[
        "no acute cardiopulmonary process .",
        "no acute cardiopulmonary abnormality is identified .",
    ],
    &[
        "the cardiomediastinal contour is widened .",
        "there is widening of the superior mediastinum .",
        "mediastinal widening is again demonstrated .",
    ],
    &[
        "the heart is moderately enlarged .",
        "there is mild cardiomegaly .",
        "the cardiac silhouette is enlarged compared to prior .",
    ],
    &[
        "there is patchy opacity in the left lower lobe .",
        "hazy opacities are seen at both lung bases .",
        "an ill-defined opacity projects over the right midlung .",
    ],
    &[
        "a nodular lesion is noted in the right upper lobe .",
        "there is a spiculated pulmonary mass .",
        "a rounded nodule measuring one centimeter is present .",
    ],
    &[
        "there is mild pulmonary edema .",
        "interstitial edema is present with vascular congestion .",
        "findings are consistent with moderate edema .",
    ],
    &[
        "focal consolidation is present in the right lower lobe .",
        "there is dense retrocardiac consolidation .",
    ],
    &[
        "findings are concerning for pneumonia .",
        "an infectious process such as pneumonia cannot be excluded .",
    ],
    &[
        "bibasilar atelectasis is noted .",
        "there is subsegmental atelectasis in the left base .",
        "linear atelectasis is seen in the lingula .",
    ],
    &[
        "a small right apical pneumothorax is present .",
        "there is a moderate left pneumothorax .",
    ],
    &[
        "there is a small left pleural effusion .",
        "bilateral pleural effusions are present .",
        "a layering right effusion is seen .",
    ],
    &[
        "there is pleural thickening at the right base .",
        "blunting of the costophrenic angle reflects pleural scarring .",
    ],
    &[
        "an old healed rib fracture is seen .",
        "there is an acute fracture of the left clavicle .",
    ],
    &[
        "a right internal jugular catheter terminates in the lower svc .",
        "an endotracheal tube terminates above the carina .",
        "a dual lead pacemaker is in place .",
    ],
];

/// Trigger phrases per disease. A label is present when any of its phrases
/// occurs as a contiguous token run.
pub const DISEASE_TRIGGERS: [&[&str]; NUM_ENTITIES] = [
    &["no acute cardiopulmonary"],
    &["contour is widened", "widening of the superior mediastinum", "mediastinal widening"],
    &["heart is moderately enlarged", "cardiomegaly", "cardiac silhouette is enlarged"],
    &["patchy opacity", "hazy opacities", "defined opacity"],
    &["nodular lesion", "pulmonary mass", "rounded nodule"],
    &["edema"],
    &["consolidation"],
    &["pneumonia"],
    &["atelectasis"],
    &["pneumothorax"],
    &["effusion", "effusions"],
    &["pleural thickening", "pleural scarring"],
    &["fracture"],
    &["catheter", "endotracheal tube", "pacemaker"],
];

/// Every text the vocabulary is built from.
pub fn corpus_texts() -> Vec<&'static str> {
    let mut texts = vec![INSTRUCTION];
    texts.extend(NORMAL_SENTENCES);
    texts.extend(DISEASE_PHRASES.iter().flat_map(|p| p.iter().copied()));
    texts.extend(crate::kgraph::CHEXPERT_LABELS);
    texts
}
