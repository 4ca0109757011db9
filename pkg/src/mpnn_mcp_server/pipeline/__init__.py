# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: Apache-2.0

"""Datasets, networks, losses and training loops of the segmentation pipeline."""
