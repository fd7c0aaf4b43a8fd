"""orthoseg: AI-assisted orthoimage annotation engine.

Headless building blocks for the three-step annotation workflow:
assisted region annotation (drawing, cutting, border editing, graph-cut
refinement, click-driven segmentation), custom classifier creation
(dataset export, baseline training, metrics), and assisted editing of
automatic predictions (seamless tiled inference committed as editable
regions), plus project persistence, analysis, and an HTTP service.
"""

from .raster import (ClassCatalog, LabelRaster, OrthoMap, RasterWindow,
                     export_labelmap, import_labelmap, open_orthomap,
                     read_window)
from .regions import (Provenance, Region, RegionStats, compute_stats, merge,
                      rasterize, subtract, vectorize)
from .tools import Sketch, cut, edit_border, freehand_close
from .graphcut import (FlowNetwork, RefineParams, build_refine_network,
                       max_flow, refine)
from .clicks import (BuiltinBackend, ClickSet, ExternalBackend, ExtremeClicks,
                     segment_clicks, segment_extreme)
from .dataset import (SplitCriterion, TileDataset, WorkingArea,
                      export_dataset, load_dataset, merge_datasets)
from .models import (BaselineModel, EvalReport, Hyperparams, ModelHandle,
                     evaluate, predict_tile, train)
from .inference import (InferenceConfig, commit_regions, preview,
                        run_inference, window_weight)
from .analysis import (ChangeRecord, CoverageReport, coverage, detect_changes,
                       export_csv)
from .project import Project, TxOp, export_vector, import_vector, load, save

__version__ = "0.1.0"
