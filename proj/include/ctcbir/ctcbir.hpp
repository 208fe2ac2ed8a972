// Copyright (c) 2026, The ctcbir Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Umbrella header. The HTTP binding lives in ctcbir/service_http.hpp and needs the vendored httplib.h.

#include "ctcbir/augment.hpp"
#include "ctcbir/checkpoint.hpp"
#include "ctcbir/cli.hpp"
#include "ctcbir/embed_index.hpp"
#include "ctcbir/explain.hpp"
#include "ctcbir/imaging.hpp"
#include "ctcbir/metrics.hpp"
#include "ctcbir/model.hpp"
#include "ctcbir/phantom.hpp"
#include "ctcbir/relax.hpp"
#include "ctcbir/service.hpp"
#include "ctcbir/ssl.hpp"
#include "ctcbir/volume_io.hpp"
