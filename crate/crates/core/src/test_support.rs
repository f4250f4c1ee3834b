pub(crate) use crate::relocation::random_instance;
