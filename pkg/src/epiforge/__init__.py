"""County-level epidemic forecasting toolkit.

Subpackages cover data ingestion (geo), the spatially-mixed SEIR simulator
(seir), a small reverse-mode neural substrate (nn), the two forecasters
(cleirnet, tdefsi), mutual-information county scoring (dependency), metric
evaluation (evaluation), report/figure rendering (report) and the CLI (cli).
"""

__version__ = "0.1.0"
