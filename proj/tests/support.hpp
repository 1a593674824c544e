#pragma once

#include <gtest/gtest.h>

#include "fd.hpp"
