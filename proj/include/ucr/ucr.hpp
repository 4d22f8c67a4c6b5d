#ifndef UCR_UCR_HPP
#define UCR_UCR_HPP

#include "ucr/core.hpp"
#include "ucr/ingest.hpp"
#include "ucr/clustering.hpp"
#include "ucr/listbuilder.hpp"
#include "ucr/embeddings.hpp"
#include "ucr/model.hpp"
#include "ucr/gradcheck.hpp"
#include "ucr/metrics.hpp"
#include "ucr/stats.hpp"
#include "ucr/trainer.hpp"

#endif  // UCR_UCR_HPP
