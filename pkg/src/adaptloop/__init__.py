"""Desk-scale IoT platform with causality-driven self-labeling."""

from .broker import (Broker, PublishAck, StreamCursor, TopicDescriptor,
                     SeqRegressionError, UnknownTopicError)
from .envelope import SampleEnvelope
from .kg import KgEdge, KgNode, KgStore, TruthTable
from .slb import (CauseResolution, EffectEvent, SelfLabelRecord,
                  SelfLabelStore, SlbEngine, SlbWorkflow, WorkflowSpec,
                  compute_cause_window)

__version__ = "0.1.0"

__all__ = [
    "Broker", "PublishAck", "StreamCursor", "TopicDescriptor",
    "SeqRegressionError", "UnknownTopicError", "SampleEnvelope",
    "KgEdge", "KgNode", "KgStore", "TruthTable",
    "CauseResolution", "EffectEvent", "SelfLabelRecord", "SelfLabelStore",
    "SlbEngine", "SlbWorkflow", "WorkflowSpec", "compute_cause_window",
]
