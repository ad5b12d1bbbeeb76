#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

from .version import __version__
