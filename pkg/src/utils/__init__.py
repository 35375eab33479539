# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Internal utilities used through the covariate-shift bandit simulator."""
