"""Shared test fixtures and oracles."""

import numpy as np

from longctx.longcap import CaptionRecord


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def fixture_caption_records():
    """The 10-record pipeline fixture: mixed visual/non-visual content."""
    rows = [
        ("histology slide of liver tissue", ("the section shows hepatocytes with clear cytoplasm",),
         "We examined liver biopsies stained with standard protocols.", {"HE": "hematoxylin and eosin"}),
        ("HE stain of tumor margin", ("arrows mark the invasive front of the tumor",),
         "Tumor margins were assessed in resected specimens.", {"HE": "hematoxylin and eosin"}),
        ("chest radiograph with right basal opacity", ("the opacity obscures the right hemidiaphragm",),
         "Patient survival improved after treatment in this cohort.", {"CXR": "chest X-ray"}),
        ("fluorescence image of labeled cells", ("green fluorescence marks transfected cells",),
         "Imaging was performed at fixed exposure.", {"GFP": "green fluorescent protein"}),
        ("electron micrograph of mitochondria", ("cristae appear densely packed",),
         "Ultrastructure was preserved by rapid fixation.", {}),
        ("CT section at the level of the kidneys", ("both kidneys show normal enhancement",),
         "Follow-up imaging showed improved outcome at one year.", {"CT": "computed tomography"}),
        ("gel electrophoresis of PCR products", ("lane three contains the positive control band",),
         "Amplification used thirty cycles.", {"PCR": "polymerase chain reaction"}),
        ("fundus photograph of the left eye", ("the optic disc margins are sharp",),
         "Retinal images were graded by two readers.", {}),
        ("scatter plot of measured intensities", ("each point is one imaged cell",),
         "Intensity correlated with marker expression.", {}),
        ("MRI brain axial slice", ("a hyperintense lesion sits in the left frontal lobe",),
         "Lesion burden predicted prognosis in the full cohort.", {"MRI": "magnetic resonance imaging"}),
    ]
    return [
        CaptionRecord(id=f"fix-{i:02d}", image_ref=f"img://{i:02d}",
                      caption=cap, inline_mentions=mentions, abstract=abstract,
                      acronym_map=acronyms)
        for i, (cap, mentions, abstract, acronyms) in enumerate(rows)
    ]
