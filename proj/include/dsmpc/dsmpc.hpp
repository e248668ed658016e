/*
 Copyright 2026 The dsmpc Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#ifndef DSMPC_DSMPC_HPP
#define DSMPC_DSMPC_HPP

#include "dsmpc/errors.hpp"
#include "dsmpc/experiment.hpp"
#include "dsmpc/fim.hpp"
#include "dsmpc/linalg.hpp"
#include "dsmpc/model.hpp"
#include "dsmpc/pfilter.hpp"
#include "dsmpc/random.hpp"
#include "dsmpc/smpc.hpp"
#include "dsmpc/stability.hpp"
#include "dsmpc/tan.hpp"

#endif  // DSMPC_DSMPC_HPP
