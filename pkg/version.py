"""
Centralized version and file-format metadata.

This is the single source of truth for version information used throughout fokkerid.
Update APP_VERSION here when releasing a new version. Bump a *_FORMAT string only when
the corresponding file layout changes incompatibly.
"""

# Application version - update this for each release
# Format: MAJOR.MINOR.PATCH (semver)
APP_VERSION = "0.3.1"

# Header strings written into every artifact so readers can reject stale files
MESH_FORMAT = "FOKKERID-MESH-v1"
RUN_FORMAT = "FOKKERID-RUN-v1"
MEASUREMENT_FORMAT = "FOKKERID-MEASUREMENT-v1"
SCENARIO_FORMAT = "FOKKERID-SCENARIO-v1"
